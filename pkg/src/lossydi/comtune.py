"""Loss-aware fine-tuning of a split network.

The pre-trained network is cut at the division layer and the codec plus a
dropout layer are spliced in between the halves::

    f_out . decompress . dropout(r) . compress . f_in

Training that composite teaches the halves to cope with both the codec's
distortion and elements that never arrive.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import codec as cdc
from .codec import CodecSpec, PcaSpec, QuantizerSpec
from .errors import DimensionError
from .nncore import (
    Dropout,
    History,
    Layer,
    Network,
    TrainConfig,
    deserialize,
    forward,
    init_mlp,
    serialize,
    split,
    train,
)

QUANT = "quant"
PCA = "pca"
FLOAT_BYTES = 4


class QuantizeStage(Layer):
    """Quantize then dequantize; gradients pass straight through inside the clip range."""

    kind = "quantize"

    def __init__(self, spec: QuantizerSpec):
        self.spec = spec

    @property
    def in_dim(self):
        return self.spec.in_dim

    @property
    def out_dim(self):
        return self.spec.in_dim

    def forward(self, x, train, rng):
        inside = (x >= self.spec.s_min) & (x <= self.spec.s_max)
        return cdc.dequantize(cdc.quantize(x, self.spec), self.spec), inside

    def backward(self, grad, cache):
        return grad * cache, []


class PcaCompressStage(Layer):
    kind = "pca_compress"

    def __init__(self, spec: PcaSpec):
        self.spec = spec

    @property
    def in_dim(self):
        return self.spec.in_dim

    @property
    def out_dim(self):
        return self.spec.out_dim

    def forward(self, x, train, rng):
        return cdc.pca_compress(x, self.spec), None

    def backward(self, grad, cache):
        return grad @ self.spec.weight, []


class PcaDecompressStage(Layer):
    kind = "pca_decompress"

    def __init__(self, spec: PcaSpec):
        self.spec = spec

    @property
    def in_dim(self):
        return self.spec.out_dim

    @property
    def out_dim(self):
        return self.spec.in_dim

    def forward(self, x, train, rng):
        return cdc.pca_decompress(x, self.spec), None

    def backward(self, grad, cache):
        return grad @ self.spec.weight.T, []


@dataclass
class ComtuneConfig:
    """Fine-tuning setup.

    Either pass a fitted ``codec`` or name one with ``codec_kind`` and
    ``message_bytes``; the latter is calibrated on the pre-trained split
    activations before any tuning happens.
    """

    dropout_rate: float
    division_index: int
    train: TrainConfig = field(default_factory=TrainConfig)
    codec: CodecSpec | None = None
    codec_kind: str | None = None
    message_bytes: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")
        if self.codec_kind not in (None, QUANT, PCA):
            raise ValueError(f"unknown codec kind {self.codec_kind!r}")
        if self.codec_kind is not None and self.message_bytes is None:
            raise ValueError("a codec kind needs a message size budget")


@dataclass
class TrainingGraph:
    network: Network
    n_input_layers: int
    n_stage_layers: int
    codec: CodecSpec | None

    @property
    def dropout_layer(self) -> Dropout:
        stages = self.network.layers[self.n_input_layers : self.n_input_layers + self.n_stage_layers]
        return next(layer for layer in stages if isinstance(layer, Dropout))


@dataclass
class FineTuneResult:
    f_in: Network
    f_out: Network
    codec: CodecSpec | None
    history: History | None
    division_index: int
    dropout_rate: float
    message_bytes: int | None = None

    @property
    def width(self) -> int:
        return self.f_in.out_dim


def pretrain_base(features, labels, widths, train_config: TrainConfig) -> tuple[Network, History]:
    """Train a randomly initialized MLP; this becomes the pre-obtained model."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if widths[0] != features.shape[1]:
        raise DimensionError(f"input width {widths[0]} != feature count {features.shape[1]}")
    if labels.max() >= widths[-1]:
        raise DimensionError(f"output width {widths[-1]} cannot represent label {labels.max()}")
    net = init_mlp(widths, train_config.seed)
    return train(net, features, labels, train_config)


def split_activations(f_pre: Network, division_index: int, features) -> np.ndarray:
    f_in, _ = split(f_pre, division_index)
    return forward(f_in, features).output


def calibrate_codec(activations: np.ndarray, kind: str, message_bytes: int) -> CodecSpec:
    """Fit the codec for a byte budget, relative to the 32-bit float message."""
    width = activations.shape[1]
    float_bytes = width * FLOAT_BYTES
    if kind == QUANT:
        return cdc.calibrate_quantizer(activations, cdc.bits_for_budget(message_bytes, float_bytes))
    if kind == PCA:
        return cdc.fit_pca(activations, cdc.dims_for_budget(message_bytes, float_bytes, width))
    raise ValueError(f"unknown codec kind {kind!r}")


def codec_stages(spec: CodecSpec | None, dropout_rate: float) -> list[Layer]:
    if spec is None:
        return [Dropout(dropout_rate)]
    if isinstance(spec, QuantizerSpec):
        # dropped codes become zeros in the real domain, so dropout follows dequantization
        return [QuantizeStage(spec), Dropout(dropout_rate)]
    return [PcaCompressStage(spec), Dropout(dropout_rate), PcaDecompressStage(spec)]


def assemble_training_graph(f_pre: Network, config: ComtuneConfig, spec: CodecSpec | None = None) -> TrainingGraph:
    spec = config.codec if spec is None else spec
    f_in, f_out = split(f_pre, config.division_index)
    if spec is not None and spec.in_dim != f_in.out_dim:
        raise DimensionError(f"codec width {spec.in_dim} != split activation width {f_in.out_dim}")
    stages = codec_stages(spec, config.dropout_rate)
    net = Network(list(f_in.layers) + stages + list(f_out.layers))
    return TrainingGraph(net, len(f_in), len(stages), spec)


def fine_tune(f_pre: Network, features, labels, config: ComtuneConfig) -> FineTuneResult:
    spec = config.codec
    if spec is None and config.codec_kind is not None:
        acts = split_activations(f_pre, config.division_index, features)
        spec = calibrate_codec(acts, config.codec_kind, config.message_bytes)
    graph = assemble_training_graph(f_pre, config, spec)
    tuned, history = train(graph.network, features, labels, config.train)
    layers = tuned.layers
    f_in = Network(layers[: graph.n_input_layers])
    f_out = Network(layers[graph.n_input_layers + graph.n_stage_layers :])
    return FineTuneResult(
        f_in, f_out, spec, history, config.division_index, config.dropout_rate, config.message_bytes
    )


MANIFEST = "manifest.txt"
F_IN_FILE = "f_in.lsnn"
F_OUT_FILE = "f_out.lsnn"
CODEC_FILE = "codec.bin"


def save_artifacts(result: FineTuneResult, directory) -> None:
    """Write both sub-networks, the codec file and a key=value manifest."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, F_IN_FILE), "wb") as fh:
        fh.write(serialize(result.f_in))
    with open(os.path.join(directory, F_OUT_FILE), "wb") as fh:
        fh.write(serialize(result.f_out))
    if result.codec is not None:
        with open(os.path.join(directory, CODEC_FILE), "wb") as fh:
            fh.write(cdc.serialize_codec(result.codec))
    lines = [
        f"division_index={result.division_index}",
        f"dropout_rate={result.dropout_rate!r}",
        f"message_bytes={result.message_bytes if result.message_bytes is not None else 'uncompressed'}",
        f"codec={result.codec.kind if result.codec is not None else 'none'}",
        f"activation_width={result.width}",
        f"calibration_sha256={cdc.codec_digest(result.codec)}",
    ]
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(directory) -> dict[str, str]:
    out = {}
    with open(os.path.join(directory, MANIFEST)) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                out[key.strip()] = value.strip()
    return out


def load_artifacts(directory) -> FineTuneResult:
    meta = read_manifest(directory)
    with open(os.path.join(directory, F_IN_FILE), "rb") as fh:
        f_in = deserialize(fh.read())
    with open(os.path.join(directory, F_OUT_FILE), "rb") as fh:
        f_out = deserialize(fh.read())
    spec = None
    codec_path = os.path.join(directory, CODEC_FILE)
    if meta.get("codec", "none") != "none":
        with open(codec_path, "rb") as fh:
            spec = cdc.deserialize_codec(fh.read())
        if cdc.codec_digest(spec) != meta.get("calibration_sha256"):
            raise ValueError(f"codec file in {directory} does not match the manifest hash")
    budget = meta.get("message_bytes", "uncompressed")
    return FineTuneResult(
        f_in,
        f_out,
        spec,
        None,
        int(meta["division_index"]),
        float(meta["dropout_rate"]),
        None if budget == "uncompressed" else int(budget),
    )
