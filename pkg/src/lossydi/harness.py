"""Datasets, experiment sweeps, summary statistics and CSV output."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np

from . import channel as ch
from .channel import ChannelConfig
from .comtune import ComtuneConfig, PCA, QUANT, fine_tune, pretrain_base
from .dipipeline import Deployment, evaluate
from .nncore import TrainConfig

UNCOMPRESSED = "uncompressed"
NO_CODEC = "none"

RECORD_COLUMNS = [
    "arm_id",
    "codec",
    "r",
    "M_bytes",
    "p",
    "seed",
    "accuracy",
    "mean_latency_ms",
    "fraction_received_mean",
    "all_lost_count",
]


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    source: str = "memory"
    seed: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be N x d with one label per row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def gen_synthetic(
    seed: int,
    d: int = 64,
    classes: int = 10,
    n_train: int = 5000,
    n_test: int = 1000,
    spread: float = 4.0,
) -> tuple[Dataset, Dataset]:
    """Gaussian mixture with one unit-covariance component per class.

    Class means are the vertices of a randomly rotated regular simplex whose
    edge length is ``spread``.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if d < classes:
        raise ValueError("feature dimension must be at least the class count")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(d, classes)))
    means = basis.T * (spread / math.sqrt(2.0))
    means -= means.mean(axis=0)

    def draw(n):
        labels = rng.integers(0, classes, size=n)
        return means[labels] + rng.normal(size=(n, d)), labels

    (xtr, ytr), (xte, yte) = draw(n_train), draw(n_test)
    return (
        Dataset(xtr, ytr, classes, "synthetic", seed),
        Dataset(xte, yte, classes, "synthetic", seed),
    )


def load_csv(path, class_count: int | None = None) -> Dataset:
    """Rows of real features followed by an integer label; a header row is optional."""
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                values = [float(cell) for cell in row[:-1]]
                label_value = float(row[-1])
            except ValueError:
                if lineno == 1 and not rows:
                    continue
                raise ValueError(f"{path}:{lineno}: non-numeric field") from None
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise ValueError(f"{path}:{lineno}: expected {width + 1} fields, got {len(row)}")
            if label_value != int(label_value) or label_value < 0:
                raise ValueError(f"{path}:{lineno}: label must be a non-negative integer")
            rows.append(values)
            labels.append(int(label_value))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    inferred = max(labels) + 1
    if class_count is not None and inferred > class_count:
        raise ValueError(f"{path}: label {inferred - 1} is not below class count {class_count}")
    return Dataset(np.array(rows), np.array(labels), class_count or inferred, str(path))


def load_datasets(spec: dict) -> tuple[Dataset, Dataset]:
    kind = spec.get("kind", "synthetic")
    if kind == "synthetic":
        args = {k: v for k, v in spec.items() if k != "kind"}
        return gen_synthetic(**args)
    if kind == "csv":
        count = spec.get("class_count")
        train = load_csv(spec["train"], count)
        test = load_csv(spec["test"], count or train.class_count)
        count = max(train.class_count, test.class_count)
        return replace(train, class_count=count), replace(test, class_count=count)
    raise ValueError(f"unknown dataset kind {kind!r}")


@dataclass(frozen=True)
class Arm:
    """One fine-tuning setting: dropout rate, codec kind and message budget in bytes."""

    r: float
    codec: str = NO_CODEC
    message_bytes: int | None = None

    def __post_init__(self):
        if self.codec not in (NO_CODEC, QUANT, PCA):
            raise ValueError(f"unknown codec {self.codec!r}")
        if (self.codec == NO_CODEC) != (self.message_bytes is None):
            raise ValueError("a codec needs a message budget and vice versa")

    @property
    def arm_id(self) -> str:
        size = UNCOMPRESSED if self.message_bytes is None else f"{self.message_bytes}B"
        return f"r{self.r:g}-{self.codec}-{size}"

    @property
    def m_label(self) -> str:
        return UNCOMPRESSED if self.message_bytes is None else str(self.message_bytes)


def _train_config(data: dict | None, **defaults) -> dict:
    out = dict(defaults)
    out.update(data or {})
    return out


@dataclass
class SweepConfig:
    loss_rates: list[float] = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(10)])
    dropout_rates: list[float] = field(default_factory=lambda: [0.0, 0.2, 0.5])
    message_sizes: list = field(default_factory=lambda: [UNCOMPRESSED])
    codecs: list[str] = field(default_factory=lambda: [QUANT])
    arms: list[Arm] | None = None
    trials: int = 10
    base_seed: int = 0
    architecture: list[int] = field(default_factory=lambda: [64, 256, 128, 10])
    division_index: int = 2
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic", "seed": 1234})
    # test samples per evaluation; None uses the whole test set
    eval_samples: int | None = None
    workers: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.eval_samples is not None and self.eval_samples < 1:
            raise ValueError("eval_samples must be positive")
        for p in self.loss_rates:
            ch.check_loss_rate(p)
        for r in self.dropout_rates:
            if not 0.0 <= r < 1.0:
                raise ValueError(f"dropout rate {r} outside [0, 1)")
        if self.arms is not None:
            self.arms = [a if isinstance(a, Arm) else Arm(**a) for a in self.arms]
        if isinstance(self.channel, dict):
            self.channel = ChannelConfig(**self.channel)

    def arm_list(self) -> list[Arm]:
        if self.arms is not None:
            return list(self.arms)
        out = []
        for r in self.dropout_rates:
            for size in self.message_sizes:
                if size == UNCOMPRESSED or size is None:
                    out.append(Arm(r))
                else:
                    out.extend(Arm(r, kind, int(size)) for kind in self.codecs)
        return out

    def pretrain_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**_train_config(self.pretrain, seed=seed))

    def finetune_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**_train_config(self.finetune, seed=seed))

    @classmethod
    def from_dict(cls, data: dict) -> "SweepConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown sweep config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "SweepConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.arms is None:
            out["arms"] = None
        return out


@dataclass
class TrialRecord:
    arm_id: str
    codec: str
    r: float
    M_bytes: str
    p: float
    seed: int
    accuracy: float
    mean_latency_ms: float
    fraction_received_mean: float
    all_lost_count: int

    def row(self) -> list[str]:
        return [
            self.arm_id,
            self.codec,
            repr(float(self.r)),
            self.M_bytes,
            repr(float(self.p)),
            str(self.seed),
            repr(self.accuracy),
            repr(self.mean_latency_ms),
            repr(self.fraction_received_mean),
            str(self.all_lost_count),
        ]

    @classmethod
    def from_row(cls, row: dict) -> "TrialRecord":
        return cls(
            row["arm_id"],
            row["codec"],
            float(row["r"]),
            row["M_bytes"],
            float(row["p"]),
            int(row["seed"]),
            float(row["accuracy"]),
            float(row["mean_latency_ms"]),
            float(row["fraction_received_mean"]),
            int(row["all_lost_count"]),
        )


def mask_rng(seed: int, p_index: int) -> np.random.Generator:
    # shared by every arm of a trial, so arms see the same loss draws where shapes agree
    return np.random.default_rng([seed, 7919, p_index])


def run_trial(config: SweepConfig, seed: int, train: Dataset | None = None, test: Dataset | None = None) -> list[TrialRecord]:
    """Pretrain once for this seed, then fine-tune and evaluate every arm."""
    if train is None or test is None:
        train, test = load_datasets(config.dataset)
    test_x, test_y = test.features[: config.eval_samples], test.labels[: config.eval_samples]
    widths = list(config.architecture)
    base, _ = pretrain_base(train.features, train.labels, widths, config.pretrain_config(seed))
    records = []
    for arm in config.arm_list():
        try:
            result = fine_tune(
                base,
                train.features,
                train.labels,
                ComtuneConfig(
                    dropout_rate=arm.r,
                    division_index=config.division_index,
                    train=config.finetune_config(seed),
                    codec_kind=None if arm.codec == NO_CODEC else arm.codec,
                    message_bytes=arm.message_bytes,
                ),
            )
        except Exception as exc:
            raise RuntimeError(f"arm {arm.arm_id}, seed {seed}: {exc}") from exc
        deployment = Deployment.from_result(result, config.channel)
        for j, p in enumerate(config.loss_rates):
            stats = evaluate(deployment, test_x, test_y, p, mask_rng(seed, j))
            records.append(
                TrialRecord(
                    arm.arm_id,
                    arm.codec,
                    arm.r,
                    arm.m_label,
                    p,
                    seed,
                    stats.accuracy,
                    stats.latency_s * 1e3,
                    stats.fraction_received_mean,
                    stats.all_lost_count,
                )
            )
    return records


def _trial_job(args):
    config, seed = args
    return run_trial(config, seed)


def run_sweep(config: SweepConfig, out=None) -> list[TrialRecord]:
    """Run every (arm, loss rate, seed) cell and stream rows to ``out``.

    ``out`` may be a path or a text stream. Single-worker runs write rows in
    seed order and are byte-reproducible; with several workers whole trials
    are written as they finish.
    """
    seeds = [config.base_seed + i for i in range(config.trials)]
    own = isinstance(out, (str, os.PathLike))
    fh = open(out, "w", newline="") if own else out
    writer = csv.writer(fh, lineterminator="\n") if fh is not None else None
    if writer:
        writer.writerow(RECORD_COLUMNS)
    records: list[TrialRecord] = []

    def emit(batch):
        for rec in batch:
            records.append(rec)
            if writer:
                writer.writerow(rec.row())
        if fh is not None:
            fh.flush()

    try:
        if config.workers > 1:
            with ProcessPoolExecutor(config.workers) as pool:
                for batch in pool.map(_trial_job, [(config, s) for s in seeds]):
                    emit(batch)
        else:
            train, test = load_datasets(config.dataset)
            for seed in seeds:
                emit(run_trial(config, seed, train, test))
    finally:
        if own:
            fh.close()
    return records


def read_records(path) -> list[TrialRecord]:
    with open(path, newline="") as fh:
        return [TrialRecord.from_row(row) for row in csv.DictReader(fh)]


def cdf(samples: Iterable[float]) -> list[tuple[float, float]]:
    """Empirical CDF as (value, P(X <= value)) at each distinct sample value."""
    values = np.sort(np.asarray(list(samples), dtype=np.float64))
    if values.size == 0:
        return []
    uniq, counts = np.unique(values, return_counts=True)
    cum = np.cumsum(counts) / values.size
    cum[-1] = 1.0
    return [(float(v), float(c)) for v, c in zip(uniq, cum)]


@dataclass
class SummaryRow:
    arm_id: str
    p: float
    n: int
    accuracy_mean: float
    accuracy_std: float
    single_trial: bool


def summarize(records: Sequence[TrialRecord]) -> list[SummaryRow]:
    """Mean and sample standard deviation of accuracy per (arm, loss rate)."""
    groups: dict[tuple[str, float], list[float]] = {}
    for rec in records:
        groups.setdefault((rec.arm_id, rec.p), []).append(rec.accuracy)
    out = []
    for (arm_id, p), accs in groups.items():
        a = np.asarray(accs)
        std = float(a.std(ddof=1)) if a.size > 1 else 0.0
        out.append(SummaryRow(arm_id, p, a.size, float(a.mean()), std, a.size == 1))
    return out


def mean_accuracy(records: Sequence[TrialRecord], arm_id: str, p: float) -> float:
    accs = [r.accuracy for r in records if r.arm_id == arm_id and math.isclose(r.p, p)]
    if not accs:
        raise KeyError(f"no records for arm {arm_id} at p={p}")
    return float(np.mean(accs))


def write_summary(rows: Sequence[SummaryRow], out) -> None:
    own = isinstance(out, (str, os.PathLike))
    fh = open(out, "w", newline="") if own else out
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm_id", "p", "n", "accuracy_mean", "accuracy_std", "single_trial"])
        for r in rows:
            w.writerow([r.arm_id, repr(r.p), r.n, repr(r.accuracy_mean), repr(r.accuracy_std), int(r.single_trial)])
    finally:
        if own:
            fh.close()


def analytics(
    message_bytes: int,
    p: float,
    packet_payload: int = 100,
    throughput: float = 9.0e6,
    k_max: int | None = None,
) -> dict[str, list[list]]:
    """Tables for the received-packet PMF, reliable-transfer latency PMF/CDF and unreliable latency."""
    p = ch.check_loss_rate(p)
    model = ch.LatencyModel.from_link(packet_payload, throughput)
    n_t = math.ceil(message_bytes / packet_payload)
    if k_max is None:
        # long enough that the truncated tail is negligible for moderate p
        k_max = max(n_t + 1, int(math.ceil(n_t / (1.0 - p) * 2 + 60)))
    received = [["n_received", "probability"]]
    for k, pr in enumerate(ch.pmf_received(n_t, p)):
        received.append([k, repr(float(pr))])
    reliable = [["transmissions", "latency_ms", "probability", "cumulative"]]
    total = 0.0
    for k, (tau, pr) in enumerate(ch.pmf_latency_reliable(n_t, p, model, k_max), start=n_t):
        total += pr
        reliable.append([k, repr(tau * 1e3), repr(pr), repr(min(total, 1.0))])
    raw, packetized = ch.latency_for_bytes(message_bytes, packet_payload, throughput)
    latency = [
        ["message_bytes", "n_t", "packet_time_ms", "p", "unreliable_latency_ms", "size_over_throughput_ms", "expected_received"],
        [
            message_bytes,
            n_t,
            repr(model.packet_time * 1e3),
            repr(p),
            repr(packetized * 1e3),
            repr(raw * 1e3),
            repr((1.0 - p) * n_t),
        ],
    ]
    return {"received_pmf": received, "reliable_latency_pmf": reliable, "latency": latency}


def write_tables(tables: dict[str, list[list]], directory) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name, rows in tables.items():
        path = os.path.join(directory, f"{name}.csv")
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
        paths.append(path)
    return paths


def records_to_csv(records: Sequence[TrialRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for rec in records:
        w.writerow(rec.row())
    return buf.getvalue()
