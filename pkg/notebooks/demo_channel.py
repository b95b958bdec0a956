"""
Packet loss and latency on a lossy link
=======================================

How many packets of a split-point message survive an unreliable link, and
what waiting for all of them would cost under retransmission.
"""

import numpy as np

from lossydi import channel as ch

############################################################
# A 64 kB message cut into 100-byte UDP payloads on a 9 Mbit/s link

raw, packetized = ch.latency_for_bytes(65536, 100, 9.0e6)
n_t = int(np.ceil(65536 / 100))
print(f"{n_t} packets, {raw * 1e3:.2f} ms by size/rate, {packetized * 1e3:.2f} ms by packet count")

############################################################
# Distribution of received packets at 50% loss. The mass sits tightly
# around half of them, so an unreliable transfer still delivers a
# predictable fraction of the activation.

pmf = ch.pmf_received(n_t, 0.5)
k = np.arange(n_t + 1)
mean = pmf @ k
sd = np.sqrt(pmf @ (k - mean) ** 2)
print(f"received: mean {mean:.1f}, sd {sd:.2f}, P(all lost) = {pmf[0]:.3e}")

############################################################
# Retransmitting until everything arrives. Even a three-packet message
# has a long latency tail once the loss rate is high.

model = ch.LatencyModel.from_link(100, 9.0e6)
for p in (0.1, 0.5, 0.9):
    dist = ch.pmf_latency_reliable(3, p, model, 200)
    lat = np.array([t for t, _ in dist])
    prob = np.array([pr for _, pr in dist])
    cdf = np.cumsum(prob)
    q99 = lat[np.searchsorted(cdf, 0.99)]
    print(f"p={p}: mean {lat @ prob * 1e3:.3f} ms, 99th percentile {q99 * 1e3:.3f} ms")

############################################################
# Elements are spread across packets by a fixed seeded shuffle, so a lost
# packet removes scattered activations instead of a contiguous block.

perm = ch.permutation(42, 16)
print("element order:", perm)
batch = ch.packetize(np.arange(16.0), 4, 42)
survived = ch.transmit(batch, 0.5, np.random.default_rng(1))
values, count = ch.reconstruct(survived, 16)
print(f"{len(survived.packets)} of {len(batch.packets)} packets arrived, {count} elements filled:", values)
