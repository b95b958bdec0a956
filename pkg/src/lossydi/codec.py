"""Lossy activation codecs: per-element affine quantization and PCA reduction.

Both codecs are calibrated offline from a set of split-point activations and
are immutable afterwards.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import BudgetError, DimensionError, ParseError
from .nncore import ByteReader

MAX_BITS = 31
FLOAT_BITS = 32
DEGENERATE_WIDEN = 1e-6


def bits_for_budget(message_bytes: float, float_bytes: float) -> int:
    """Bit width that fits ``message_bytes`` when the 32-bit message takes ``float_bytes``.

    Results of 32 (no compression) are capped at 31 so codes stay in signed
    32-bit range.
    """
    if not 0 < message_bytes <= float_bytes:
        raise BudgetError(f"message size {message_bytes} must lie in (0, {float_bytes}]")
    n = (FLOAT_BITS * int(message_bytes)) // int(float_bytes)
    if n < 1:
        raise BudgetError(f"{message_bytes} bytes cannot carry one bit per element")
    return min(n, MAX_BITS)


def dims_for_budget(message_bytes: float, full_bytes: float, dim: int) -> int:
    """Number of PCA coefficients that fit the budget: floor(M * D / M_full)."""
    if not 0 < message_bytes <= full_bytes:
        raise BudgetError(f"message size {message_bytes} must lie in (0, {full_bytes}]")
    d = (int(message_bytes) * dim) // int(full_bytes)
    if d < 1:
        raise BudgetError(f"{message_bytes} bytes cannot carry a single coefficient")
    return d


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True, eq=False)
class QuantizerSpec:
    s_min: np.ndarray
    s_max: np.ndarray
    n_bits: int

    def __post_init__(self):
        s_min = np.asarray(self.s_min, dtype=np.float64)
        s_max = np.asarray(self.s_max, dtype=np.float64)
        if s_min.ndim != 1 or s_min.shape != s_max.shape:
            raise DimensionError("s_min and s_max must be vectors of equal length")
        if not np.all(s_min < s_max):
            raise ValueError("every s_min must be strictly below its s_max")
        if not 1 <= int(self.n_bits) <= MAX_BITS:
            raise ValueError(f"n_bits must lie in [1, {MAX_BITS}]")
        object.__setattr__(self, "s_min", s_min)
        object.__setattr__(self, "s_max", s_max)
        object.__setattr__(self, "n_bits", int(self.n_bits))

    kind = "quant"

    @property
    def in_dim(self) -> int:
        return self.s_min.shape[0]

    @property
    def out_dim(self) -> int:
        return self.in_dim

    @property
    def levels(self) -> int:
        return (1 << self.n_bits) - 1

    @property
    def step(self) -> np.ndarray:
        return (self.s_max - self.s_min) / self.levels

    def __eq__(self, other):
        if not isinstance(other, QuantizerSpec):
            return NotImplemented
        return (
            self.n_bits == other.n_bits
            and np.array_equal(self.s_min, other.s_min)
            and np.array_equal(self.s_max, other.s_max)
        )


def calibrate_quantizer(activations, n_bits: int) -> QuantizerSpec:
    """Per-element min/max scale factors over a calibration set."""
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 2:
        raise ValueError("calibration needs at least two activation vectors")
    s_min = a.min(axis=0)
    s_max = a.max(axis=0)
    flat = s_min == s_max
    s_min = np.where(flat, s_min - DEGENERATE_WIDEN, s_min)
    s_max = np.where(flat, s_max + DEGENERATE_WIDEN, s_max)
    return QuantizerSpec(s_min, s_max, n_bits)


def clip(a, spec: QuantizerSpec) -> np.ndarray:
    return np.minimum(np.maximum(np.asarray(a, dtype=np.float64), spec.s_min), spec.s_max)


def quantize(a, spec: QuantizerSpec) -> np.ndarray:
    """Integer codes in ``[0, 2**n - 1]``; works on a vector or a batch of rows."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != spec.in_dim:
        raise DimensionError(f"quantizer expects width {spec.in_dim}, got {a.shape[-1]}")
    scaled = (clip(a, spec) - spec.s_min) * spec.levels / (spec.s_max - spec.s_min)
    return np.clip(round_half_away(scaled), 0, spec.levels).astype(np.int64)


def dequantize(q, spec: QuantizerSpec) -> np.ndarray:
    q = np.asarray(q)
    if q.shape[-1] != spec.in_dim:
        raise DimensionError(f"quantizer expects width {spec.in_dim}, got {q.shape[-1]}")
    if np.any(q < 0) or np.any(q > spec.levels):
        raise ValueError(f"codes must lie in [0, {spec.levels}]")
    return spec.s_min + q.astype(np.float64) * spec.step


@dataclass(frozen=True, eq=False)
class PcaSpec:
    weight: np.ndarray
    bias: np.ndarray

    kind = "pca"

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[1],) or w.shape[0] > w.shape[1]:
            raise DimensionError(f"PCA weight {w.shape} and bias {b.shape} are inconsistent")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PcaSpec):
            return NotImplemented
        return np.array_equal(self.weight, other.weight) and np.array_equal(self.bias, other.bias)


CodecSpec = Union[QuantizerSpec, PcaSpec]


def jacobi_eigh(matrix, tol: float = 1e-10, max_sweeps: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every index pair once using a round-robin ordering, so
    the ``n // 2`` rotations within a round act on disjoint index pairs and
    are applied together. Iteration stops when the off-diagonal Frobenius
    norm falls below ``tol`` or stops shrinking. Returns unsorted eigenvalues
    and eigenvectors as columns.
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise DimensionError("matrix must be square")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v
    m = n + (n % 2)
    players = np.arange(m)

    def off_norm():
        off = a.copy()
        np.fill_diagonal(off, 0.0)
        return np.sqrt(np.sum(off * off))

    off = off_norm()
    for _ in range(max_sweeps):
        if off < tol:
            break
        for _ in range(m - 1):
            top = players[: m // 2]
            bottom = players[m // 2 :][::-1]
            keep = (top < n) & (bottom < n)
            p = np.minimum(top[keep], bottom[keep])
            q = np.maximum(top[keep], bottom[keep])
            apq = a[p, q]
            active = apq != 0.0
            if np.any(active):
                p, q, apq = p[active], q[active], apq[active]
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c[:, None] * rp - s[:, None] * rq
                a[q, :] = s[:, None] * rp + c[:, None] * rq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
            players = np.concatenate(([players[0]], np.roll(players[1:], 1)))
        new_off = off_norm()
        if new_off >= off:
            off = new_off
            break
        off = new_off
    return a.diagonal().copy(), v


def pca_eigen(activations) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigenvalues (descending), eigenvectors (rows) and mean of the calibration set.

    Covariance is normalized by the set size. Each eigenvector is signed so
    its largest-magnitude component is positive.
    """
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError("calibration set must be a 2-D array of rows")
    mean = a.mean(axis=0)
    centered = a - mean
    cov = centered.T @ centered / a.shape[0]
    values, vectors = jacobi_eigh(cov)
    order = np.argsort(-values, kind="stable")
    values = values[order]
    rows = vectors[:, order].T.copy()
    lead = rows[np.arange(rows.shape[0]), np.argmax(np.abs(rows), axis=1)]
    rows *= np.where(lead < 0, -1.0, 1.0)[:, None]
    return values, rows, mean


def fit_pca(activations, n_components: int) -> PcaSpec:
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError("calibration set must be a 2-D array of rows")
    dim = a.shape[1]
    if not 1 <= n_components <= dim:
        raise ValueError(f"component count {n_components} must lie in [1, {dim}]")
    if a.shape[0] < n_components + 1:
        raise ValueError(f"need at least {n_components + 1} calibration vectors")
    _, rows, mean = pca_eigen(a)
    kept, dropped = rows[:n_components], rows[n_components:]
    bias = dropped.T @ (dropped @ mean) if len(dropped) else np.zeros(dim)
    return PcaSpec(kept, bias)


def pca_compress(a, spec: PcaSpec) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != spec.in_dim:
        raise DimensionError(f"PCA expects width {spec.in_dim}, got {a.shape[-1]}")
    return a @ spec.weight.T


def pca_decompress(coeffs, spec: PcaSpec) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[-1] != spec.out_dim:
        raise DimensionError(f"PCA expects {spec.out_dim} coefficients, got {coeffs.shape[-1]}")
    return coeffs @ spec.weight + spec.bias


def compress(a, spec: CodecSpec) -> np.ndarray:
    """Codec-agnostic encoder: integer codes for the quantizer, coefficients for PCA."""
    return quantize(a, spec) if isinstance(spec, QuantizerSpec) else pca_compress(a, spec)


def decompress(m, spec: CodecSpec) -> np.ndarray:
    return dequantize(m, spec) if isinstance(spec, QuantizerSpec) else pca_decompress(m, spec)


# Codec file layout (little-endian):
#   quantizer: tag 1 | D u32 | n_bits u32 | s_min f64[D] | s_max f64[D]
#   pca:       tag 2 | D' u32 | D u32 | weight f64[D'*D] | bias f64[D]
def serialize_codec(spec: CodecSpec) -> bytes:
    if isinstance(spec, QuantizerSpec):
        head = struct.pack("<BII", 1, spec.in_dim, spec.n_bits)
        return head + spec.s_min.astype("<f8").tobytes() + spec.s_max.astype("<f8").tobytes()
    head = struct.pack("<BII", 2, spec.out_dim, spec.in_dim)
    return head + spec.weight.astype("<f8").tobytes() + spec.bias.astype("<f8").tobytes()


def deserialize_codec(data: bytes) -> CodecSpec:
    r = ByteReader(bytes(data))
    (tag,) = r.unpack("<B", "codec tag")
    try:
        if tag == 1:
            dim, n_bits = r.unpack("<II", "quantizer dims")
            spec: CodecSpec = QuantizerSpec(r.array(dim, "s_min"), r.array(dim, "s_max"), n_bits)
        elif tag == 2:
            d_out, d_in = r.unpack("<II", "PCA dims")
            weight = r.array(d_out * d_in, "PCA weight").reshape(d_out, d_in)
            spec = PcaSpec(weight, r.array(d_in, "PCA bias"))
        else:
            raise ParseError(f"unknown codec tag {tag}", 0)
    except (ValueError, DimensionError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(str(exc), r.offset) from exc
    r.finish()
    return spec


def codec_digest(spec: CodecSpec | None) -> str:
    """SHA-256 of the codec file bytes, used to pin calibration in manifests."""
    if spec is None:
        return "none"
    return hashlib.sha256(serialize_codec(spec)).hexdigest()
