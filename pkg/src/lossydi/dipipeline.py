"""Split inference over a lossy link, simulated in-process.

Device side: run the input sub-network and compress. Link: drop elements
(independently, or whole shuffled packets). Server side: zero-fill, scale by
``1/(1-p)``, decompress, run the output sub-network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import channel as ch
from . import codec as cdc
from .channel import ChannelConfig
from .codec import CodecSpec, PcaSpec, QuantizerSpec
from .comtune import FineTuneResult
from .errors import DimensionError
from .nncore import Network, forward

FLOAT_BYTES = 4
DEFAULT_PERMUTATION_SEED = 0x5EED


@dataclass(frozen=True)
class Deployment:
    f_in: Network
    f_out: Network
    codec: CodecSpec | None = None
    channel: ChannelConfig = ChannelConfig()
    permutation_seed: int = DEFAULT_PERMUTATION_SEED
    # round float messages through IEEE-754 single precision, as on the wire
    float32_messages: bool = False
    compensate_observed: bool = False

    def __post_init__(self):
        width = self.f_in.out_dim
        if self.codec is not None and self.codec.in_dim != width:
            raise DimensionError(f"codec width {self.codec.in_dim} != split width {width}")
        if self.f_out.in_dim is not None and self.f_out.in_dim != width:
            raise DimensionError(f"output sub-network expects {self.f_out.in_dim}, split width is {width}")

    @classmethod
    def from_result(cls, result: FineTuneResult, channel: ChannelConfig = ChannelConfig(), **kwargs) -> "Deployment":
        return cls(result.f_in, result.f_out, result.codec, channel, **kwargs)

    @property
    def width(self) -> int:
        return self.f_in.out_dim

    @property
    def message_length(self) -> int:
        return self.width if self.codec is None else self.codec.out_dim

    @property
    def quantized(self) -> bool:
        return isinstance(self.codec, QuantizerSpec)

    @property
    def element_bytes(self) -> int:
        """Bytes per element on the wire: byte-aligned codes, or float32."""
        if self.quantized:
            return math.ceil(self.codec.n_bits / 8)
        return FLOAT_BYTES

    @property
    def message_bytes(self) -> int:
        return self.message_length * self.element_bytes

    @property
    def elements_per_packet(self) -> int:
        return self.channel.elements_per_packet(self.element_bytes)

    @property
    def packet_count(self) -> int:
        return ch.packet_count(self.message_length, self.elements_per_packet)

    @property
    def latency_s(self) -> float:
        return ch.latency_unreliable(self.packet_count, self.channel.latency_model)


@dataclass
class InferenceOutcome:
    predicted_class: int
    probabilities: np.ndarray
    latency_s: float
    fraction_received: float
    all_lost: bool


def device_encode(x, deployment: Deployment) -> np.ndarray:
    """Eval-mode split activation, compressed: codes, coefficients, or raw values."""
    act = forward(deployment.f_in, x).output
    if np.ndim(x) == 1:
        act = act[0]
    if deployment.codec is None:
        msg = act
    elif isinstance(deployment.codec, QuantizerSpec):
        return cdc.quantize(act, deployment.codec)
    else:
        msg = cdc.pca_compress(act, deployment.codec)
    if deployment.float32_messages:
        msg = msg.astype(np.float32).astype(np.float64)
    return msg


def compensate(received, mask, p: float, deployment: Deployment) -> np.ndarray:
    """Zero-filled, loss-compensated, decompressed split activation.

    Quantized codes are dequantized first so that missing elements are zero
    in the real domain, then the whole vector is scaled.
    """
    p = ch.check_loss_rate(p)
    received = np.asarray(received)
    mask = np.asarray(mask, dtype=bool)
    if received.shape != mask.shape or received.shape[-1] != deployment.message_length:
        raise DimensionError("received message and mask must both have the message length")
    if deployment.compensate_observed:
        frac = mask.mean(axis=-1, keepdims=True)
        scale = np.where(frac > 0, 1.0 / np.where(frac > 0, frac, 1.0), 1.0)
    else:
        scale = 1.0 / (1.0 - p)
    spec = deployment.codec
    if isinstance(spec, QuantizerSpec):
        codes = np.where(mask, received, 0)
        return cdc.dequantize(codes, spec) * mask * scale
    values = np.where(mask, received.astype(np.float64), 0.0) * scale
    if isinstance(spec, PcaSpec):
        return cdc.pca_decompress(values, spec)
    return values


def server_decode(received, mask, p: float, deployment: Deployment) -> InferenceOutcome:
    p = ch.check_loss_rate(p)
    mask = np.asarray(mask, dtype=bool)
    act = compensate(received, mask, p, deployment)
    probs = forward(deployment.f_out, act).output[0]
    return InferenceOutcome(
        predicted_class=int(np.argmax(probs)),
        probabilities=probs,
        latency_s=deployment.latency_s,
        fraction_received=float(mask.mean()),
        all_lost=not bool(mask.any()),
    )


def draw_mask(deployment: Deployment, p: float, rng: np.random.Generator, batch: int | None = None) -> np.ndarray:
    """Which message elements arrive, under the deployment's loss granularity."""
    p = ch.check_loss_rate(p)
    length = deployment.message_length
    shape = (length,) if batch is None else (batch, length)
    if deployment.channel.mode == ch.ELEMENT_IID:
        return rng.random(shape) >= p
    s = deployment.elements_per_packet
    n_t = ch.packet_count(length, s)
    keep = rng.random(shape[:-1] + (n_t,)) >= p
    slot_keep = np.repeat(keep, s, axis=-1)[..., :length]
    mask = np.empty(shape, dtype=bool)
    mask[..., ch.permutation(deployment.permutation_seed, length)] = slot_keep
    return mask


def infer_once(x, deployment: Deployment, rng: np.random.Generator, p: float | None = None) -> InferenceOutcome:
    """One end-to-end inference with a fresh loss realization."""
    p = deployment.channel.p if p is None else p
    msg = device_encode(np.asarray(x, dtype=np.float64).reshape(-1), deployment)
    if deployment.channel.mode == ch.PACKET_LEVEL:
        batch = ch.packetize(msg, deployment.elements_per_packet, deployment.permutation_seed)
        arrived = ch.transmit(batch, p, rng)
        received, _ = ch.reconstruct(arrived)
        mask = np.zeros(msg.size, dtype=bool)
        for index, _values in arrived.packets:
            mask[arrived.element_indices(index)] = True
        if deployment.quantized:
            received = received.astype(np.int64)
    else:
        mask = draw_mask(deployment, p, rng)
        received = np.where(mask, msg, 0)
    return server_decode(received, mask, p, deployment)


@dataclass
class EvalStats:
    accuracy: float
    fraction_received_mean: float
    all_lost_count: int
    latency_s: float
    n: int


def evaluate(deployment: Deployment, features, labels, p: float, rng: np.random.Generator) -> EvalStats:
    """Accuracy over a test set with one independent loss draw per sample."""
    p = ch.check_loss_rate(p)
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    msg = device_encode(features, deployment)
    mask = draw_mask(deployment, p, rng, batch=len(labels))
    act = compensate(np.where(mask, msg, 0), mask, p, deployment)
    probs = forward(deployment.f_out, act).output
    pred = np.argmax(probs, axis=1)
    return EvalStats(
        accuracy=float(np.mean(pred == labels)),
        fraction_received_mean=float(mask.mean()),
        all_lost_count=int(np.sum(~mask.any(axis=1))),
        latency_s=deployment.latency_s,
        n=len(labels),
    )
