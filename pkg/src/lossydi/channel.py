"""Unreliable-link model: element masking, shuffled packetization, and the
received-count and latency distributions of unreliable and reliable transport.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ConfigError

ELEMENT_IID = "element"
PACKET_LEVEL = "packet"

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """64-bit SplitMix generator; the only randomness used for element shuffling."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)


@lru_cache(maxsize=64)
def _permutation(seed: int, size: int) -> tuple[int, ...]:
    perm = list(range(size))
    rng = SplitMix64(seed)
    for i in range(size - 1, 0, -1):
        j = rng.next() % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return tuple(perm)


def permutation(seed: int, size: int) -> np.ndarray:
    """Fisher-Yates shuffle of ``range(size)`` driven by SplitMix64.

    ``permutation(seed, D)[k]`` is the original index of the element stored
    in slot ``k`` of the packet stream.
    """
    return np.array(_permutation(int(seed), int(size)), dtype=np.int64)


def check_loss_rate(p: float) -> float:
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"loss rate must lie in [0, 1), got {p}")
    return p


@dataclass(frozen=True)
class ChannelConfig:
    p: float = 0.0
    packet_payload: int = 100
    throughput: float = 9.0e6
    mode: str = ELEMENT_IID

    def __post_init__(self):
        check_loss_rate(self.p)
        if self.packet_payload < 1:
            raise ConfigError("packet payload must be at least one byte")
        if self.throughput <= 0:
            raise ConfigError("throughput must be positive")
        if self.mode not in (ELEMENT_IID, PACKET_LEVEL):
            raise ConfigError(f"unknown loss mode {self.mode!r}")

    @property
    def latency_model(self) -> "LatencyModel":
        return LatencyModel.from_link(self.packet_payload, self.throughput)

    def elements_per_packet(self, element_bytes: int) -> int:
        return max(1, self.packet_payload // element_bytes)


@dataclass(frozen=True)
class LatencyModel:
    """Seconds needed to put one packet on the link."""

    packet_time: float

    def __post_init__(self):
        if self.packet_time <= 0:
            raise ConfigError("packet transmission time must be positive")

    @classmethod
    def from_link(cls, packet_payload: int, throughput: float) -> "LatencyModel":
        return cls(packet_payload * 8.0 / throughput)


def apply_elementwise(x, p: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Zero each element independently with probability ``p``."""
    p = check_loss_rate(p)
    x = np.asarray(x, dtype=np.float64)
    mask = rng.random(x.shape) >= p
    return x * mask, mask


@dataclass
class PacketBatch:
    message_id: int
    permutation_seed: int
    elements_per_packet: int
    size: int
    packets: list[tuple[int, np.ndarray]]
    total_packets: int

    def element_indices(self, packet_index: int) -> np.ndarray:
        return packet_indices(self.permutation_seed, self.size, self.elements_per_packet, packet_index)

    def subset(self, keep) -> "PacketBatch":
        kept = [pkt for pkt, k in zip(self.packets, keep) if k]
        return PacketBatch(
            self.message_id, self.permutation_seed, self.elements_per_packet, self.size, kept, self.total_packets
        )


def packet_count(size: int, elements_per_packet: int) -> int:
    return -(-size // elements_per_packet)


def packet_indices(seed: int, size: int, elements_per_packet: int, packet_index: int) -> np.ndarray:
    start = packet_index * elements_per_packet
    return permutation(seed, size)[start : start + elements_per_packet]


def packetize(x, elements_per_packet: int, permutation_seed: int, message_id: int = 0) -> PacketBatch:
    """Shuffle the vector and cut it into consecutive runs of ``elements_per_packet``."""
    x = np.asarray(x)
    if x.ndim != 1 or x.size < 1:
        raise ValueError("packetize needs a non-empty vector")
    s = int(elements_per_packet)
    if s < 1:
        raise ValueError("need at least one element per packet")
    shuffled = x[permutation(permutation_seed, x.size)]
    n_t = packet_count(x.size, s)
    packets = [(i, shuffled[i * s : (i + 1) * s].copy()) for i in range(n_t)]
    return PacketBatch(message_id, permutation_seed, s, x.size, packets, n_t)


def transmit(batch: PacketBatch, p: float, rng: np.random.Generator) -> PacketBatch:
    """Independently drop each packet with probability ``p``; nothing is resent."""
    p = check_loss_rate(p)
    keep = rng.random(len(batch.packets)) >= p
    return batch.subset(keep)


def reconstruct(received: PacketBatch, size: int | None = None) -> tuple[np.ndarray, int]:
    """Zero-filled vector from whichever packets arrived, plus the count of elements placed."""
    size = received.size if size is None else size
    perm = permutation(received.permutation_seed, size)
    out = np.zeros(size, dtype=np.float64)
    count = 0
    s = received.elements_per_packet
    for index, values in received.packets:
        idx = perm[index * s : index * s + len(values)]
        out[idx] = values
        count += len(values)
    return out, count


def packet_mask(size: int, elements_per_packet: int, permutation_seed: int, p: float, rng) -> np.ndarray:
    """Element mask produced by packet-level loss, without materializing packets."""
    p = check_loss_rate(p)
    n_t = packet_count(size, elements_per_packet)
    keep = rng.random(n_t) >= p
    slot_keep = np.repeat(keep, elements_per_packet)[:size]
    mask = np.empty(size, dtype=bool)
    mask[permutation(permutation_seed, size)] = slot_keep
    return mask


def _log_binom(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def _xlogy(count, prob):
    # count * log(prob) with 0 * log(0) = 0
    count = np.asarray(count, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = count * np.log(prob)
    return np.where(count == 0, 0.0, out)


def pmf_received(n_t: int, p: float) -> np.ndarray:
    """Probability of receiving exactly 0..n_t of n_t packets."""
    p = check_loss_rate(p)
    if n_t < 0:
        raise ValueError("packet count must be non-negative")
    k = np.arange(n_t + 1, dtype=np.float64)
    log_pmf = _log_binom(n_t, k) + _xlogy(n_t - k, p) + _xlogy(k, 1.0 - p)
    # log-gamma at large n_t shifts every term by a common ~1e-12; renormalizing removes it
    return np.exp(log_pmf - logsumexp(log_pmf))


def latency_unreliable(n_t: int, model: LatencyModel) -> float:
    return n_t * model.packet_time


def latency_for_bytes(message_bytes: float, packet_payload: int, throughput: float) -> tuple[float, float]:
    """Latency of an unreliable transfer as (size / throughput, ceil(size / payload) * T)."""
    raw = message_bytes * 8.0 / throughput
    n_t = math.ceil(message_bytes / packet_payload)
    return raw, latency_unreliable(n_t, LatencyModel.from_link(packet_payload, throughput))


def pmf_latency_reliable(n_t: int, p: float, model: LatencyModel, k_max: int) -> list[tuple[float, float]]:
    """Latency distribution under retransmit-until-delivered.

    Returns ``(k * T, P(k transmissions))`` for ``k = n_t .. k_max``: the
    negative-binomial law of the number of attempts needed for ``n_t``
    successes.
    """
    p = check_loss_rate(p)
    if n_t < 1:
        raise ValueError("need at least one packet")
    if k_max < n_t:
        raise ValueError(f"k_max={k_max} is below the packet count {n_t}")
    k = np.arange(n_t, k_max + 1, dtype=np.float64)
    log_pmf = _log_binom(k - 1, n_t - 1) + _xlogy(k - n_t, p) + n_t * math.log1p(-p)
    probs = np.exp(log_pmf)
    return [(float(kk) * model.packet_time, float(pr)) for kk, pr in zip(k, probs)]
