"""Minimal feedforward network engine.

Layers work on row batches of shape ``(N, features)``. Every layer exposes
``forward(x, train, rng) -> (y, cache)`` and ``backward(grad, cache) ->
(grad_in, param_grads)``; anything that follows that protocol can be placed in
a :class:`Network`, which is how the fine-tuning graph splices codec stages
between two sub-networks.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, ParseError, StateError

TRAIN = "train"
EVAL = "eval"

CE_FLOOR = 1e-12


class Layer:
    """Parameter-free identity layer; subclasses override what they need."""

    kind = "layer"
    in_dim: int | None = None
    out_dim: int | None = None

    @property
    def params(self) -> list[np.ndarray]:
        return []

    def with_params(self, params: Sequence[np.ndarray]) -> "Layer":
        return self

    def forward(self, x, train, rng):
        return x, None

    def backward(self, grad, cache):
        return grad, []

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        if len(self.params) != len(other.params):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.params, other.params)) and (
            self._extra() == other._extra()
        )

    def _extra(self):
        return ()

    def __repr__(self):
        return f"{type(self).__name__}()"


class Dense(Layer):
    kind = "dense"

    def __init__(self, weight, bias):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise DimensionError(
                f"dense weight {weight.shape} and bias {bias.shape} are inconsistent"
            )
        self.weight = weight
        self.bias = bias

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @property
    def params(self):
        return [self.weight, self.bias]

    def with_params(self, params):
        return Dense(params[0], params[1])

    def forward(self, x, train, rng):
        if x.shape[1] != self.in_dim:
            raise DimensionError(f"dense layer expects width {self.in_dim}, got {x.shape[1]}")
        return x @ self.weight.T + self.bias, x

    def backward(self, grad, cache):
        x = cache
        return grad @ self.weight, [grad.T @ x, grad.sum(axis=0)]

    def __repr__(self):
        return f"Dense({self.in_dim}, {self.out_dim})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train, rng):
        return np.maximum(x, 0.0), x > 0.0

    def backward(self, grad, cache):
        # subgradient at exactly 0 is 0
        return grad * cache, []


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train, rng):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=1, keepdims=True)
        return s, s

    def backward(self, grad, cache):
        s = cache
        return s * (grad - (grad * s).sum(axis=1, keepdims=True)), []


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1/(1-rate)``.

    In eval mode this is the identity. The training mask is kept in the cache
    so the backward pass routes gradient only through surviving units.
    """

    kind = "dropout"

    def __init__(self, rate: float):
        rate = float(rate)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train, rng):
        if not train:
            return x, None
        if rng is None:
            raise StateError("dropout in train mode needs a random generator")
        if self.rate == 0.0:
            # no draw, so a rate-0 layer leaves the random stream untouched
            return x.copy(), np.ones(x.shape, dtype=bool)
        mask = rng.random(x.shape) >= self.rate
        return x * mask / (1.0 - self.rate), mask

    def backward(self, grad, cache):
        if cache is None:
            raise StateError("dropout mask missing: backward needs a train-mode forward")
        return grad * cache / (1.0 - self.rate), []

    def _extra(self):
        return (self.rate,)

    def __repr__(self):
        return f"Dropout({self.rate})"


class Network:
    """Ordered, shape-checked stack of layers."""

    def __init__(self, layers: Sequence[Layer]):
        layers = list(layers)
        if not layers:
            raise DimensionError("a network needs at least one layer")
        width = None
        for i, layer in enumerate(layers):
            if layer.in_dim is not None:
                if width is not None and layer.in_dim != width:
                    raise DimensionError(
                        f"layer {i} ({layer!r}) expects width {layer.in_dim}, previous width is {width}"
                    )
            if layer.out_dim is not None:
                width = layer.out_dim
        self.layers = tuple(layers)

    def __len__(self):
        return len(self.layers)

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return len(self) == len(other) and all(a == b for a, b in zip(self.layers, other.layers))

    def __repr__(self):
        return "Network([" + ", ".join(repr(layer) for layer in self.layers) + "])"

    @property
    def in_dim(self):
        for layer in self.layers:
            if layer.in_dim is not None:
                return layer.in_dim
        return None

    @property
    def out_dim(self):
        for layer in reversed(self.layers):
            if layer.out_dim is not None:
                return layer.out_dim
        return self.in_dim

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def with_params(self, params: Sequence[np.ndarray]) -> "Network":
        params = list(params)
        layers = []
        for layer in self.layers:
            n = len(layer.params)
            layers.append(layer.with_params(params[:n]) if n else layer)
            params = params[n:]
        if params:
            raise DimensionError("more parameter arrays than the network holds")
        return Network(layers)

    def copy(self) -> "Network":
        return Network(copy.deepcopy(list(self.layers)))


def init_mlp(widths: Sequence[int], seed: int, dropout_after: dict[int, float] | None = None) -> Network:
    """Dense/ReLU stack ending in softmax, Glorot-uniform weights and zero biases.

    ``dropout_after`` maps a hidden-layer number (0-based) to a dropout rate
    placed right after that layer's ReLU.
    """
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(Dense(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out)))
        if i < len(widths) - 2:
            layers.append(ReLU())
            if dropout_after and i in dropout_after:
                layers.append(Dropout(dropout_after[i]))
    layers.append(Softmax())
    return Network(layers)


@dataclass
class Trace:
    """Activations of one forward pass; ``activations[0]`` is the input."""

    activations: list[np.ndarray]
    caches: list
    mode: str

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


def forward(net: Network, x, mode: str = EVAL, rng: np.random.Generator | None = None) -> Trace:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionError(f"expected a vector or a batch of rows, got shape {x.shape}")
    if net.in_dim is not None and x.shape[1] != net.in_dim:
        raise DimensionError(f"network expects width {net.in_dim}, got {x.shape[1]}")
    train = mode == TRAIN
    acts = [x]
    caches = []
    for layer in net.layers:
        x, cache = layer.forward(x, train, rng)
        acts.append(x)
        caches.append(cache)
    return Trace(acts, caches, mode)


def predict(net: Network, x) -> np.ndarray:
    """Eval-mode output, with the input's rank preserved."""
    x = np.asarray(x, dtype=np.float64)
    out = forward(net, x).output
    return out[0] if x.ndim == 1 else out


def backward(net: Network, trace: Trace, grad_output) -> tuple[list[list[np.ndarray]], np.ndarray]:
    """Gradients of a scalar loss for every layer's parameters and for the input."""
    if trace.mode != TRAIN and any(isinstance(layer, Dropout) for layer in net.layers):
        raise StateError("backward through dropout needs a train-mode trace")
    grad = np.asarray(grad_output, dtype=np.float64)
    if grad.ndim == 1:
        grad = grad[None, :]
    if grad.shape != trace.output.shape:
        raise DimensionError(f"gradient shape {grad.shape} != output shape {trace.output.shape}")
    param_grads: list[list[np.ndarray]] = [[] for _ in net.layers]
    for i in range(len(net.layers) - 1, -1, -1):
        grad, param_grads[i] = net.layers[i].backward(grad, trace.caches[i])
    return param_grads, grad


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(probs[label], CE_FLOOR)))


def cross_entropy_batch(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient with respect to ``probs``."""
    n = probs.shape[0]
    rows = np.arange(n)
    picked = np.maximum(probs[rows, labels], CE_FLOOR)
    grad = np.zeros_like(probs)
    grad[rows, labels] = np.where(probs[rows, labels] > CE_FLOOR, -1.0 / picked, 0.0) / n
    return float(-np.log(picked).mean()), grad


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Sequence[np.ndarray], **kwargs) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kwargs)


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state are not aligned")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"parameter {p.shape} and gradient {g.shape} differ")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    max_epochs: int = 150
    patience: int = 20
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("max_epochs, batch_size and patience must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    stopped_early: bool = False
    kept_epoch: int = 0

    @property
    def epochs(self) -> int:
        return len(self.val_loss)


def mean_loss(net: Network, features: np.ndarray, labels: np.ndarray) -> float:
    probs = forward(net, features).output
    return cross_entropy_batch(probs, labels)[0]


def train(
    net: Network,
    features,
    labels,
    config: TrainConfig,
    evaluate: Callable[[Network], float] | None = None,
) -> tuple[Network, History]:
    """Mini-batch Adam with a seeded 9:1 update/validation split.

    Stops after ``max_epochs`` or once the validation loss has risen for
    ``patience`` consecutive epochs; in the latter case the parameters of the
    epoch just before the rising streak are returned. ``evaluate`` replaces
    the validation-loss computation when given.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0 or features.shape[0] != n:
        raise ValueError("training set is empty or features and labels disagree")
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(n * config.validation_fraction))), n - 1) if n > 1 else 0
    val_idx, upd_idx = perm[:n_val], perm[n_val:]
    if evaluate is None:
        if n_val == 0:
            raise ValueError("need at least two samples to hold out validation data")
        x_val, y_val = features[val_idx], labels[val_idx]
        evaluate = lambda candidate: mean_loss(candidate, x_val, y_val)  # noqa: E731

    work = net.copy()
    state = AdamState.zeros(work.params)
    history = History()
    kept, kept_epoch = work, 0
    prev = None
    streak = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(upd_idx)
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            trace = forward(work, features[idx], TRAIN, rng)
            loss, grad = cross_entropy_batch(trace.output, labels[idx])
            layer_grads, _ = backward(work, trace, grad)
            flat = [g for gs in layer_grads for g in gs]
            params, state = adam_step(work.params, flat, state, config.learning_rate)
            work = work.with_params(params)
            total += loss * len(idx)
        history.train_loss.append(total / len(order))
        val = float(evaluate(work))
        history.val_loss.append(val)
        if prev is not None and val > prev:
            streak += 1
        else:
            streak = 0
            kept, kept_epoch = work, epoch
        prev = val
        if streak >= config.patience:
            history.stopped_early = True
            history.kept_epoch = kept_epoch
            return kept, history
    history.kept_epoch = config.max_epochs
    return work, history


def split(net: Network, division_index: int) -> tuple[Network, Network]:
    if not 0 < division_index < len(net):
        raise IndexError(f"division index {division_index} outside (0, {len(net)})")
    return Network(net.layers[:division_index]), Network(net.layers[division_index:])


def concat(*nets: Network) -> Network:
    return Network([layer for net in nets for layer in net.layers])


# Model file layout (all little-endian):
#   "LSNN" | version u16 | layer count u16 | layers...
#   dense:   tag 1 | in u32 | out u32 | weight f64[out*in] | bias f64[out]
#   relu:    tag 2
#   softmax: tag 3
#   dropout: tag 4 | rate f64
MODEL_MAGIC = b"LSNN"
MODEL_VERSION = 1
_TAGS = {"dense": 1, "relu": 2, "softmax": 3, "dropout": 4}


def serialize(net: Network) -> bytes:
    out = bytearray(MODEL_MAGIC)
    out += struct.pack("<HH", MODEL_VERSION, len(net))
    for layer in net.layers:
        if layer.kind not in _TAGS:
            raise TypeError(f"layer {layer!r} has no model-file encoding")
        out += struct.pack("<B", _TAGS[layer.kind])
        if isinstance(layer, Dense):
            out += struct.pack("<II", layer.in_dim, layer.out_dim)
            out += layer.weight.astype("<f8").tobytes()
            out += layer.bias.astype("<f8").tobytes()
        elif isinstance(layer, Dropout):
            out += struct.pack("<d", layer.rate)
    return bytes(out)


class ByteReader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise ParseError(f"truncated stream while reading {what}", self.offset)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, count: int, what: str, dtype: str = "<f8") -> np.ndarray:
        size = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * size, what), dtype=dtype).astype(np.float64)

    def finish(self):
        if self.offset != len(self.data):
            raise ParseError("trailing bytes after last record", self.offset)


def deserialize(data: bytes) -> Network:
    r = ByteReader(bytes(data))
    if r.take(4, "magic") != MODEL_MAGIC:
        raise ParseError("bad magic, not a model file", 0)
    (version,) = r.unpack("<H", "version")
    if version != MODEL_VERSION:
        raise ParseError(f"unsupported model version {version}", 4)
    (count,) = r.unpack("<H", "layer count")
    if count == 0:
        raise ParseError("model has no layers", 6)
    layers: list[Layer] = []
    for _ in range(count):
        at = r.offset
        (tag,) = r.unpack("<B", "layer tag")
        if tag == 1:
            n_in, n_out = r.unpack("<II", "dense dims")
            weight = r.array(n_in * n_out, "dense weight").reshape(n_out, n_in)
            layers.append(Dense(weight, r.array(n_out, "dense bias")))
        elif tag == 2:
            layers.append(ReLU())
        elif tag == 3:
            layers.append(Softmax())
        elif tag == 4:
            (rate,) = r.unpack("<d", "dropout rate")
            if not 0.0 <= rate < 1.0:
                raise ParseError(f"dropout rate {rate} out of range", at)
            layers.append(Dropout(rate))
        else:
            raise ParseError(f"unknown layer tag {tag}", at)
    r.finish()
    try:
        return Network(layers)
    except DimensionError as exc:
        raise ParseError(str(exc), r.offset) from exc
