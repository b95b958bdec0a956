import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from lossydi import channel as ch
from lossydi.errors import ConfigError
from oracles import pool_tails, simulate_received, simulate_retransmissions

REF_LINK = ch.LatencyModel.from_link(100, 9.0e6)


class TestSplitMix64:
    def test_reference_sequence(self):
        # published reference outputs for seed 1234567
        rng = ch.SplitMix64(1234567)
        assert [rng.next() for _ in range(5)] == [
            6457827717110365317,
            3203168211198807973,
            9817491932198370423,
            4593380528125082431,
            16408922859458223821,
        ]

    def test_golden_permutation(self):
        assert ch.permutation(42, 8).tolist() == [3, 1, 6, 2, 4, 0, 7, 5]

    def test_permutation_follows_modulo_fisher_yates(self):
        rng = ch.SplitMix64(7)
        ref = list(range(20))
        for i in range(19, 0, -1):
            j = rng.next() % (i + 1)
            ref[i], ref[j] = ref[j], ref[i]
        assert ch.permutation(7, 20).tolist() == ref


class TestElementwise:
    def test_no_loss(self):
        x = np.arange(5.0)
        out, mask = ch.apply_elementwise(x, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, x)
        assert mask.all()

    def test_kept_fraction(self):
        _, mask = ch.apply_elementwise(np.ones(100_000), 0.5, np.random.default_rng(1))
        assert abs(mask.mean() - 0.5) <= 0.01

    def test_zero_vector(self):
        out, _ = ch.apply_elementwise(np.zeros(10), 0.3, np.random.default_rng(2))
        np.testing.assert_array_equal(out, 0.0)

    def test_chi_square_goodness_of_fit(self):
        _, mask = ch.apply_elementwise(np.ones(100_000), 0.3, np.random.default_rng(3))
        dropped = int((~mask).sum())
        observed = [dropped, mask.size - dropped]
        expected = [0.3 * mask.size, 0.7 * mask.size]
        assert stats.chisquare(observed, expected).pvalue > 0.01

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_rejects_bad_rate(self, p):
        with pytest.raises(ConfigError):
            ch.apply_elementwise(np.ones(3), p, np.random.default_rng(0))


class TestPackets:
    def test_packet_sizes(self):
        batch = ch.packetize(np.arange(5.0), 2, 0)
        assert [len(v) for _, v in batch.packets] == [2, 2, 1]
        assert batch.total_packets == 3

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 300), st.integers(1, 40), st.integers(0, 2**32 - 1))
    def test_round_trip(self, size, s, seed):
        x = np.random.default_rng(seed).normal(size=size)
        batch = ch.packetize(x, s, seed)
        out, count = ch.reconstruct(batch)
        np.testing.assert_array_equal(out, x)
        assert count == size
        indices = np.concatenate([batch.element_indices(i) for i, _ in batch.packets])
        assert sorted(indices.tolist()) == list(range(size))

    def test_deterministic_contents(self):
        x = np.arange(8.0) * 10
        a = ch.packetize(x, 3, 42)
        b = ch.packetize(x, 3, 42)
        for (i, u), (j, v) in zip(a.packets, b.packets):
            assert i == j
            np.testing.assert_array_equal(u, v)
        np.testing.assert_array_equal(a.packets[0][1], [30.0, 10.0, 60.0])

    def test_transmit_without_loss(self):
        batch = ch.packetize(np.ones(50), 7, 1)
        assert len(ch.transmit(batch, 0.0, np.random.default_rng(0)).packets) == batch.total_packets

    def test_transmit_binomial_counts(self):
        batch = ch.packetize(np.ones(2), 1, 0)
        rng = np.random.default_rng(4)
        counts = np.bincount([len(ch.transmit(batch, 0.5, rng).packets) for _ in range(100_000)], minlength=3)
        freq = counts / 100_000
        expected = np.array([0.25, 0.5, 0.25])
        sigma = np.sqrt(expected * (1 - expected) / 100_000)
        assert np.all(np.abs(freq - expected) <= 3 * sigma)

    def test_transmit_domain(self):
        batch = ch.packetize(np.ones(4), 2, 0)
        ch.transmit(batch, 0.99, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            ch.transmit(batch, 1.0, np.random.default_rng(0))

    def test_nothing_received(self):
        batch = ch.packetize(np.arange(1.0, 9.0), 3, 5)
        out, count = ch.reconstruct(batch.subset([False] * 3))
        np.testing.assert_array_equal(out, 0.0)
        assert count == 0

    def test_dropped_packet_positions(self):
        x = np.arange(1.0, 11.0)
        batch = ch.packetize(x, 4, 9)
        out, count = ch.reconstruct(batch.subset([False, True, True]))
        lost = batch.element_indices(0)
        assert np.all(out[lost] == 0)
        keep = np.setdiff1d(np.arange(10), lost)
        np.testing.assert_array_equal(out[keep], x[keep])
        assert count == 6

    def test_packet_level_marginals(self):
        size, s, p, trials = 40, 6, 0.3, 10_000
        rng = np.random.default_rng(6)
        drops = np.zeros(size)
        for _ in range(trials):
            drops += ~ch.packet_mask(size, s, 11, p, rng)
        rate = drops / trials
        assert np.all(np.abs(rate - p) <= 3 * math.sqrt(p * (1 - p) / trials))

    def test_packet_level_correlation(self):
        size, s = 12, 4
        rng = np.random.default_rng(7)
        masks = np.array([ch.packet_mask(size, s, 3, 0.5, rng) for _ in range(2000)])
        same = ch.packet_indices(3, size, s, 0)
        other = ch.packet_indices(3, size, s, 1)
        assert np.all(masks[:, same] == masks[:, same[:1]])
        assert abs(np.corrcoef(masks[:, same[0]], masks[:, other[0]])[0, 1]) < 0.1


class TestReceivedPmf:
    def test_two_packets(self):
        np.testing.assert_allclose(ch.pmf_received(2, 0.5), [0.25, 0.5, 0.25], atol=1e-15)

    def test_mean(self):
        pmf = ch.pmf_received(10, 0.2)
        assert pmf @ np.arange(11) == pytest.approx(8.0, abs=1e-9)

    @pytest.mark.parametrize("n_t,p", [(1, 0.0), (7, 0.9), (656, 0.5), (10_000, 0.3)])
    def test_sums_to_one(self, n_t, p):
        assert ch.pmf_received(n_t, p).sum() == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("n_t,p", [(30, 0.35), (656, 0.5), (10_000, 0.9)])
    def test_matches_scipy(self, n_t, p):
        np.testing.assert_allclose(
            ch.pmf_received(n_t, p), stats.binom.pmf(np.arange(n_t + 1), n_t, 1 - p), rtol=0, atol=1e-12
        )

    @pytest.mark.parametrize("n_t,p", [(2, 0.5), (10, 0.2), (656, 0.5)])
    def test_monte_carlo(self, n_t, p):
        draws = 100_000
        freq = simulate_received(n_t, p, draws, np.random.default_rng(0))
        # tail bins expecting <5 draws are pooled, the normal sigma is meaningless there
        expected, observed = pool_tails(ch.pmf_received(n_t, p), freq, 5, draws)
        assert np.all(np.abs(observed - expected) <= 3 * np.sqrt(expected * (1 - expected) / draws))
        assert stats.chisquare(observed * draws, expected * draws).pvalue > 0.001


class TestLatency:
    def test_64k_message_latency(self):
        raw, packetized = ch.latency_for_bytes(65536, 100, 9.0e6)
        assert abs(raw * 1e3 - 58.2) / 58.2 <= 0.01
        assert packetized == pytest.approx(656 * 800 / 9.0e6)
        assert abs(packetized * 1e3 - 58.2) / 58.2 <= 0.015

    def test_zero_packets(self):
        assert ch.latency_unreliable(0, REF_LINK) == 0.0

    def test_throughput_scaling(self):
        fast = ch.LatencyModel.from_link(100, 18.0e6)
        assert ch.latency_unreliable(41, fast) == pytest.approx(ch.latency_unreliable(41, REF_LINK) / 2)

    def test_reliable_lossless_is_point_mass(self):
        pmf = ch.pmf_latency_reliable(5, 0.0, REF_LINK, 12)
        assert pmf[0] == (pytest.approx(5 * REF_LINK.packet_time), 1.0)
        assert all(pr == 0.0 for _, pr in pmf[1:])

    def test_single_packet_is_geometric(self):
        pmf = ch.pmf_latency_reliable(1, 0.3, REF_LINK, 20)
        for k, (_, pr) in enumerate(pmf, start=1):
            assert pr == pytest.approx(0.3 ** (k - 1) * 0.7, rel=1e-12)

    def test_three_packets_against_retransmission_simulation(self):
        n_t, p, runs = 3, 0.5, 100_000
        pmf = ch.pmf_latency_reliable(n_t, p, REF_LINK, 60)
        probs = np.array([pr for _, pr in pmf])
        assert probs.sum() >= 0.999
        totals = simulate_retransmissions(n_t, p, runs, np.random.default_rng(9))
        freq = np.bincount(totals, minlength=61)[n_t:61] / runs
        assert np.all(np.abs(freq - probs) <= 3 * np.sqrt(probs * (1 - probs) / runs) + 1e-12)

    def test_k_max_below_packet_count(self):
        with pytest.raises(ValueError):
            ch.pmf_latency_reliable(5, 0.1, REF_LINK, 4)


class TestConfig:
    def test_defaults(self):
        cfg = ch.ChannelConfig()
        assert cfg.packet_payload == 100 and cfg.throughput == 9.0e6
        assert cfg.latency_model.packet_time == pytest.approx(800 / 9.0e6)
        assert cfg.elements_per_packet(4) == 25

    @pytest.mark.parametrize(
        "kwargs", [dict(p=1.0), dict(packet_payload=0), dict(throughput=0.0), dict(mode="burst")]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ch.ChannelConfig(**kwargs)
