"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``. Criteria 7-9 share
one 10-seed sweep at the default training settings (about half an hour on a
single core); its CSV and summary land in ``results/``.
"""

import io
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from acceptance_report import record
from lossydi import channel as ch
from lossydi import codec as cdc
from lossydi import comtune as ct
from lossydi import dipipeline as dp
from lossydi import harness as hs
from lossydi import wire
from lossydi.channel import PACKET_LEVEL, ChannelConfig
from lossydi.nncore import TRAIN, Dense, Dropout, ReLU, Softmax, backward, cross_entropy_batch, forward, init_mlp, split
from oracles import central_difference, pool_tails, relative_error, simulate_received, simulate_retransmissions

RESULTS_DIR = Path(__file__).resolve().parent.parent / "results"
LINK = ch.LatencyModel.from_link(100, 9.0e6)


def check(number, title, started, conditions):
    """Record the criterion from a list of (label, ok) pairs and assert all hold."""
    failed = [label for label, ok in conditions if not ok]
    record(number, title, not failed, "; ".join(failed) if failed else "", started)
    assert not failed, failed


def test_criterion_01_latency_arithmetic():
    t0 = time.perf_counter()
    raw, packetized = ch.latency_for_bytes(65536, 100, 9.0e6)
    check(
        1,
        f"65.5 kB at 9 Mbit/s: {raw * 1e3:.2f} ms (size/rate), {packetized * 1e3:.2f} ms (n_t*T) vs 58.2 ms",
        t0,
        [
            ("size/throughput within 1%", abs(raw * 1e3 - 58.2) / 58.2 <= 0.01),
            ("n_t*T within 1.5%", abs(packetized * 1e3 - 58.2) / 58.2 <= 0.015),
        ],
    )


def test_criterion_02_received_pmf():
    t0 = time.perf_counter()
    conds = []
    draws = 100_000
    for n_t, p in [(2, 0.5), (10, 0.2), (656, 0.5)]:
        pmf = ch.pmf_received(n_t, p)
        conds.append((f"({n_t},{p}) sum", abs(pmf.sum() - 1.0) <= 1e-12))
        conds.append((f"({n_t},{p}) mean", abs(pmf @ np.arange(n_t + 1) - (1 - p) * n_t) <= 1e-9))
        freq = simulate_received(n_t, p, draws, np.random.default_rng(0))
        # bins expecting fewer than 5 draws are pooled into the tails
        expected, observed = pool_tails(pmf, freq, 5, draws)
        sigma = np.sqrt(expected * (1 - expected) / draws)
        conds.append((f"({n_t},{p}) Monte Carlo 3 sigma", bool(np.all(np.abs(observed - expected) <= 3 * sigma))))
    elapsed = time.perf_counter() - t0
    conds.append(("runtime < 10 s", elapsed < 10))
    check(2, "received-packet PMF: normalization, mean, Monte Carlo", t0, conds)


def test_criterion_03_reliable_latency_pmf():
    t0 = time.perf_counter()
    runs = 100_000
    pmf = ch.pmf_latency_reliable(3, 0.5, LINK, 60)
    probs = np.array([pr for _, pr in pmf])
    totals = simulate_retransmissions(3, 0.5, runs, np.random.default_rng(0))
    freq = np.bincount(totals, minlength=61)[3:61] / runs
    sigma = np.sqrt(probs * (1 - probs) / runs)
    lossless = ch.pmf_latency_reliable(3, 0.0, LINK, 10)
    elapsed = time.perf_counter() - t0
    check(
        3,
        "retransmission latency PMF vs event-driven simulation",
        t0,
        [
            ("per-bin 3 sigma", bool(np.all(np.abs(freq - probs) <= 3 * sigma + 1e-12))),
            ("partial sum >= 0.999", probs.sum() >= 0.999),
            ("p=0 point mass", lossless[0] == (3 * LINK.packet_time, 1.0) and all(pr == 0 for _, pr in lossless[1:])),
            ("runtime < 30 s", elapsed < 30),
        ],
    )


def test_criterion_04_codec_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    violations = 0
    for _ in range(10_000):
        dim = 8
        lo = rng.normal(size=dim) * 3
        spec = cdc.QuantizerSpec(lo, lo + rng.uniform(0.1, 5.0, size=dim), int(rng.integers(1, 32)))
        a = rng.normal(size=dim) * 4
        err = np.abs(cdc.dequantize(cdc.quantize(a, spec), spec) - cdc.clip(a, spec))
        violations += int(np.sum(err > (spec.s_max - spec.s_min) / (2 * spec.levels) * (1 + 1e-9)))

    idempotent = True
    for n_bits in range(1, 9):
        codes = np.arange(2**n_bits)
        lo = rng.normal(size=codes.size)
        spec = cdc.QuantizerSpec(lo, lo + rng.uniform(0.1, 5.0, size=codes.size), n_bits)
        idempotent &= bool(np.array_equal(cdc.quantize(cdc.dequantize(codes, spec), spec), codes))

    mix = rng.normal(size=(8, 8))
    data = rng.normal(size=(2000, 8)) @ mix + rng.normal(size=8)
    k = 3
    spec = cdc.fit_pca(data, k)
    mean = data.mean(axis=0)
    _, vectors = np.linalg.eigh((data - mean).T @ (data - mean) / len(data))
    vectors = vectors[:, ::-1]
    eig_err = max(
        np.max(np.abs(spec.weight[i] - np.sign(vectors[:, i] @ spec.weight[i]) * vectors[:, i])) for i in range(k)
    )
    rest = vectors[:, k:]
    bias_err = np.max(np.abs(spec.bias - rest @ (rest.T @ mean)))
    probe = rng.normal(size=(50, 8)) * 3
    recon = cdc.pca_decompress(cdc.pca_compress(probe, spec), spec)
    formula = mean + (probe - mean) @ spec.weight.T @ spec.weight
    recon_err = np.max(np.abs(recon - formula))
    elapsed = time.perf_counter() - t0
    check(
        4,
        f"codec oracles (half-step violations {violations}, eigvec err {eig_err:.1e}, recon err {recon_err:.1e})",
        t0,
        [
            ("zero half-step violations", violations == 0),
            ("exhaustive idempotence n<=8", idempotent),
            ("PCA rows match dense eigh within 1e-6", eig_err <= 1e-6 and bias_err <= 1e-6),
            ("reconstruction formula within 1e-6", recon_err <= 1e-6),
            ("runtime < 1 min", elapsed < 60),
        ],
    )


def _layer_fd_error(layer, x, rng, train=False):
    mask_rng = np.random.default_rng(int(rng.integers(2**32)))
    state = mask_rng.bit_generator.state
    weights = rng.normal(size=layer.forward(x, train, np.random.default_rng(0))[0].shape)

    def run(params, inp):
        mask_rng.bit_generator.state = state
        y, _ = layer.with_params(params).forward(inp, train, mask_rng)
        return float(np.sum(weights * y))

    mask_rng.bit_generator.state = state
    _, cache = layer.forward(x, train, mask_rng)
    grad_in, param_grads = layer.backward(weights, cache)
    errs = [relative_error(grad_in, central_difference(lambda v: run(layer.params, v), x))]
    for i, g in enumerate(param_grads):

        def loss(p, i=i):
            params = list(layer.params)
            params[i] = p
            return run(params, x)

        errs.append(relative_error(g, central_difference(loss, layer.params[i])))
    return max(errs)


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.05, 0.1, x)


def test_criterion_05_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n_in, n_out, batch = (int(v) for v in rng.integers(2, 8, size=3))
        dense = Dense(rng.normal(size=(n_out, n_in)), rng.normal(size=n_out))
        cases = {
            "dense": (dense, rng.normal(size=(batch, n_in)), False),
            "relu": (ReLU(), _away_from_zero(rng, (batch, n_in)), False),
            "softmax": (Softmax(), rng.normal(size=(batch, n_in)) * 2, False),
            "dropout": (Dropout(float(rng.uniform(0.1, 0.8))), rng.normal(size=(batch, n_in)), True),
        }
        acts = rng.normal(size=(60, n_in + 2)) @ rng.normal(size=(n_in + 2, n_in + 2))
        pca = cdc.fit_pca(acts, n_in)
        cases["pca_compress"] = (ct.PcaCompressStage(pca), rng.normal(size=(batch, n_in + 2)), False)
        cases["pca_decompress"] = (ct.PcaDecompressStage(pca), rng.normal(size=(batch, n_in)), False)
        for name, (layer, x, train) in cases.items():
            worst[name] = max(worst.get(name, 0.0), _layer_fd_error(layer, x, rng, train))

        # PCA composite: loss gradient through f_out . dec . dropout . cmp . f_in w.r.t. f_in parameters
        f_pre = init_mlp([5, 7, 6, 3], seed)
        x = rng.normal(size=(6, 5))
        y = rng.integers(0, 3, size=6)
        spec = cdc.fit_pca(ct.split_activations(f_pre, 2, rng.normal(size=(40, 5))), 3)
        net = ct.assemble_training_graph(f_pre, ct.ComtuneConfig(0.3, 2, codec=spec)).network

        def loss_of(params):
            trace = forward(net.with_params(params), x, TRAIN, np.random.default_rng(seed))
            return cross_entropy_batch(trace.output, y)[0]

        trace = forward(net, x, TRAIN, np.random.default_rng(seed))
        _, grad = cross_entropy_batch(trace.output, y)
        flat = [g for gs in backward(net, trace, grad)[0] for g in gs]
        params = net.params
        errs = []
        for i in range(len(params)):

            def one(p, i=i):
                trial = list(params)
                trial[i] = p
                return loss_of(trial)

            errs.append(relative_error(flat[i], central_difference(one, params[i])))
        worst["pca_composite"] = max(worst.get("pca_composite", 0.0), max(errs))
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    conds = [(f"{k} rel err {v:.1e} > 1e-4", v <= 1e-4) for k, v in worst.items()]
    conds.append(("runtime < 1 min", elapsed < 60))
    check(5, f"finite-difference gradients, 10 configs each ({detail})", t0, conds)


def test_criterion_06_dropout_channel_equivalence():
    t0 = time.perf_counter()
    p, n = 0.5, 10_000
    f_in, f_out = split(init_mlp([6, 24, 10, 4], 3), 2)
    x = np.repeat(np.random.default_rng(4).normal(size=(1, 6)), n, axis=0)
    # training side: inverted dropout with r = p on the split activation
    train_vec, _ = Dropout(p).forward(forward(f_in, x).output, True, np.random.default_rng(5))
    # deployment side: iid element loss at p, zero fill, 1/(1-p) compensation
    dep = dp.Deployment(f_in, f_out)
    msg = dp.device_encode(x, dep)
    masks = dp.draw_mask(dep, p, np.random.default_rng(6), batch=n)
    di_vec = dp.compensate(np.where(masks, msg, 0.0), masks, p, dep)
    conds = []
    for power, name in [(1, "first"), (2, "second")]:
        a, b = train_vec**power, di_vec**power
        sigma = np.sqrt(a.var(axis=0, ddof=1) / n + b.var(axis=0, ddof=1) / n)
        gap = np.abs(a.mean(0) - b.mean(0))
        conds.append((f"{name} moments within 3 sigma", bool(np.all(gap <= 3 * sigma + 1e-12))))
    check(6, "training dropout (r=0.5) vs compensated loss (p=0.5): per-element moments agree", t0, conds)


ARMS = {
    "r0": hs.Arm(0.0),
    "r0.2": hs.Arm(0.2),
    "r0.5": hs.Arm(0.5),
    # the split activation is 256 floats = 1024 bytes; 1/4 and 1/16 of that
    "r0.2-q4": hs.Arm(0.2, hs.QUANT, 256),
    "r0.2-q16": hs.Arm(0.2, hs.QUANT, 64),
    "r0.5-q16": hs.Arm(0.5, hs.QUANT, 64),
    "r0.5-pca16": hs.Arm(0.5, hs.PCA, 64),
}


def acceptance_config(trials=10):
    return hs.SweepConfig(arms=list(ARMS.values()), trials=trials)


@pytest.fixture(scope="module")
def sweep():
    RESULTS_DIR.mkdir(exist_ok=True)
    started = time.perf_counter()
    buf = io.StringIO()
    records = hs.run_sweep(acceptance_config(), buf)
    elapsed = time.perf_counter() - started
    text = buf.getvalue()
    (RESULTS_DIR / "acceptance_sweep.csv").write_text(text)
    hs.write_summary(hs.summarize(records), str(RESULTS_DIR / "acceptance_summary.csv"))
    return records, text, elapsed


def mean_acc(records, key, p):
    return hs.mean_accuracy(records, ARMS[key].arm_id, p)


def test_criterion_07_dropout_trend(sweep):
    t0 = time.perf_counter()
    records, _, elapsed = sweep
    high = [0.5, 0.6, 0.7, 0.8, 0.9]
    gaps = {p: mean_acc(records, "r0.5", p) - mean_acc(records, "r0", p) for p in high}
    drop = {k: mean_acc(records, k, 0.0) - mean_acc(records, k, 0.7) for k in ("r0", "r0.2", "r0.5")}
    detail = (
        "r0.5-r0 gaps "
        + " ".join(f"p={p}:{g:+.4f}" for p, g in gaps.items())
        + f"; degradation r0 {drop['r0']:.4f}, r0.2 {drop['r0.2']:.4f}, r0.5 {drop['r0.5']:.4f}"
        + f"; sweep {elapsed / 60:.1f} min for 7 arms"
    )
    conds = [
        ("(a) r=0.5 > r=0 at every p >= 0.5", all(g > 0 for g in gaps.values())),
        ("(b) degradation r0.5 < r0.2 < r0", drop["r0.5"] < drop["r0.2"] < drop["r0"]),
    ]
    check(7, "dropout trend over 10 seeds (" + detail + ")", t0, conds)


def test_criterion_08_compression_trend(sweep):
    t0 = time.perf_counter()
    records, _, _ = sweep
    accs = [mean_acc(records, k, 0.5) for k in ("r0.2", "r0.2-q4", "r0.2-q16")]
    detail = f"p=0.5, r=0.2: uncompressed {accs[0]:.4f}, 1/4 {accs[1]:.4f}, 1/16 {accs[2]:.4f}"
    check(
        8,
        "quantization budget trend (" + detail + ")",
        t0,
        [("non-increasing as the budget shrinks", accs[0] >= accs[1] >= accs[2])],
    )


def test_criterion_09_quantization_vs_pca(sweep):
    t0 = time.perf_counter()
    records, _, _ = sweep
    q, pca = mean_acc(records, "r0.5-q16", 0.5), mean_acc(records, "r0.5-pca16", 0.5)
    check(
        9,
        f"1/16 budget at p=0.5: quantization {q:.4f} vs PCA {pca:.4f}",
        t0,
        [("quantization >= PCA", q >= pca)],
    )


@pytest.fixture(scope="module")
def live_deployment():
    cfg = hs.SweepConfig()
    train, test = hs.load_datasets(cfg.dataset)
    base, _ = ct.pretrain_base(train.features, train.labels, cfg.architecture, cfg.pretrain_config(0))
    tuned = ct.fine_tune(
        base, train.features, train.labels, ct.ComtuneConfig(0.5, cfg.division_index, train=cfg.finetune_config(0))
    )
    dep = dp.Deployment.from_result(tuned, ChannelConfig(mode=PACKET_LEVEL), float32_messages=True)
    return dep, test


def loopback(dep, features, p, seed):
    server = wire.Server(dep, wire.ServerConfig(deadline_ms=200, loss_rate=p, idle_timeout_s=1.0))
    thread = server.start()
    host, port = server.address
    wire.send(dep, features, wire.SenderConfig(f"{host}:{port}", p, rate=1000, seed=seed))
    thread.join(30)
    return wire.fill_missing(server.records, range(len(features)), dep, p)


def test_criterion_10_wire_loopback(live_deployment):
    t0 = time.perf_counter()
    dep, test = live_deployment
    n = len(test.labels)
    labels = test.labels

    lossless = loopback(dep, test.features, 0.0, seed=1)
    live_pred = np.array([r.outcome.predicted_class for r in lossless])
    offline = dp.evaluate(dep, test.features, labels, 0.0, np.random.default_rng(0))
    full = np.ones((n, dep.message_length), dtype=bool)
    act = dp.compensate(dp.device_encode(test.features, dep), full, 0.0, dep)
    offline_pred = np.argmax(forward(dep.f_out, act).output, axis=1)
    live_acc0 = float(np.mean(live_pred == labels))

    lossy = loopback(dep, test.features, 0.5, seed=2)
    live_acc = float(np.mean([r.outcome.predicted_class == y for r, y in zip(lossy, labels)]))
    frac = np.array([r.outcome.fraction_received for r in lossy])
    sim = dp.evaluate(dep, test.features, labels, 0.5, np.random.default_rng(3))
    acc_sigma = math.sqrt(2 * sim.accuracy * (1 - sim.accuracy) / n)
    frac_sigma = math.sqrt(0.25 / (n * dep.packet_count))
    elapsed = time.perf_counter() - t0
    check(
        10,
        f"UDP loopback, {n} messages: p=0 acc {live_acc0:.4f} vs offline {offline.accuracy:.4f}; "
        f"p=0.5 acc {live_acc:.4f} vs simulated {sim.accuracy:.4f}, received fraction {frac.mean():.4f}",
        t0,
        [
            ("p=0 reproduces offline accuracy exactly", len(lossless) == n and live_acc0 == offline.accuracy),
            ("p=0 per-message predictions match", bool(np.array_equal(live_pred, offline_pred))),
            ("p=0.5 accuracy within 3 sigma of simulation", abs(live_acc - sim.accuracy) <= 3 * acc_sigma),
            ("p=0.5 received fraction within 3 sigma of 0.5", abs(frac.mean() - 0.5) <= 3 * frac_sigma),
            ("runtime < 5 min", elapsed < 300),
        ],
    )


def test_criterion_11_determinism(sweep, tmp_path):
    t0 = time.perf_counter()
    _, text, _ = sweep
    rerun = io.StringIO()
    hs.run_sweep(acceptance_config(trials=1), rerun)
    rows_per_seed = len(ARMS) * len(acceptance_config().loss_rates)
    expected = "".join(text.splitlines(keepends=True)[: 1 + rows_per_seed])

    from lossydi.cli import main

    outs = []
    for name in ("a", "b"):
        main(["analytics", "--message-bytes", "65536", "--loss-rate", "0.5", "--out", str(tmp_path / name)])
        outs.append(sorted((f, (tmp_path / name / f).read_bytes()) for f in os.listdir(tmp_path / name)))
    check(
        11,
        "byte-identical CSV on rerun (seed-0 sweep rows, analytics tables)",
        t0,
        [("sweep rerun identical", rerun.getvalue() == expected), ("analytics rerun identical", outs[0] == outs[1])],
    )
