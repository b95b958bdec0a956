"""Command-line entry point: ``lossydi <subcommand> ...``.

Every subcommand that needs data, an architecture or a link reads the same
JSON config as ``sweep`` (the fields of :class:`SweepConfig`); flags override
individual values.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace


from . import codec as cdc
from . import comtune as ct
from . import harness as hs
from . import wire
from .channel import PACKET_LEVEL
from .dipipeline import Deployment, evaluate
from .nncore import History, deserialize, serialize

log = logging.getLogger("lossydi")

BASE_FILE = "f_pre.lsnn"


def _config(args) -> hs.SweepConfig:
    cfg = hs.SweepConfig.from_json(args.config) if args.config else hs.SweepConfig()
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    return cfg


def _write_history(history: History, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for i, (tl, vl) in enumerate(zip(history.train_loss, history.val_loss), start=1):
            w.writerow([i, repr(tl), repr(vl)])


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    train, _ = hs.load_datasets(cfg.dataset)
    net, history = ct.pretrain_base(train.features, train.labels, list(cfg.architecture), cfg.pretrain_config(args.seed))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, BASE_FILE), "wb") as fh:
        fh.write(serialize(net))
    _write_history(history, os.path.join(args.out, "pretrain_history.csv"))
    log.info("pretrained %d epochs (kept epoch %d) -> %s", history.epochs, history.kept_epoch, args.out)
    return 0


def cmd_comtune(args) -> int:
    cfg = _config(args)
    train, _ = hs.load_datasets(cfg.dataset)
    with open(args.base, "rb") as fh:
        f_pre = deserialize(fh.read())
    kind = None if args.codec == hs.NO_CODEC else args.codec
    if kind is not None and args.message_bytes is None:
        raise SystemExit("--codec needs --message-bytes")
    config = ct.ComtuneConfig(
        dropout_rate=args.r,
        division_index=cfg.division_index if args.division_index is None else args.division_index,
        train=cfg.finetune_config(args.seed),
        codec_kind=kind,
        message_bytes=args.message_bytes if kind is not None else None,
    )
    result = ct.fine_tune(f_pre, train.features, train.labels, config)
    ct.save_artifacts(result, args.out)
    _write_history(result.history, os.path.join(args.out, "finetune_history.csv"))
    log.info("fine-tuned r=%g codec=%s -> %s", args.r, args.codec, args.out)
    return 0


def _load_deployment(args, cfg: hs.SweepConfig, **kwargs) -> tuple[Deployment, ct.FineTuneResult]:
    result = ct.load_artifacts(args.model)
    if getattr(args, "codec", None):
        with open(args.codec, "rb") as fh:
            result.codec = cdc.deserialize_codec(fh.read())
    return Deployment.from_result(result, cfg.channel, **kwargs), result


def _arm_of(result: ct.FineTuneResult) -> hs.Arm:
    kind = hs.NO_CODEC if result.codec is None else result.codec.kind
    return hs.Arm(result.dropout_rate, kind, result.message_bytes if kind != hs.NO_CODEC else None)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    _, test = hs.load_datasets(cfg.dataset)
    dep, result = _load_deployment(args, cfg)
    arm = _arm_of(result)
    rates = args.loss_rate if args.loss_rate else cfg.loss_rates
    records = []
    for j, p in enumerate(rates):
        stats = evaluate(dep, test.features[: cfg.eval_samples], test.labels[: cfg.eval_samples], p, hs.mask_rng(args.seed, j))
        records.append(
            hs.TrialRecord(
                arm.arm_id,
                arm.codec,
                arm.r,
                arm.m_label,
                p,
                args.seed,
                stats.accuracy,
                stats.latency_s * 1e3,
                stats.fraction_received_mean,
                stats.all_lost_count,
            )
        )
    _emit(hs.records_to_csv(records), args.out)
    return 0


def _emit(text: str, out) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.trials is not None:
        cfg.trials = args.trials
    out = sys.stdout if args.out in (None, "-") else args.out
    records = hs.run_sweep(cfg, out)
    if args.summary:
        hs.write_summary(hs.summarize(records), args.summary)
    return 0


def cmd_analytics(args) -> int:
    tables = hs.analytics(args.message_bytes, args.loss_rate, args.payload, args.throughput, args.k_max)
    if args.out:
        for path in hs.write_tables(tables, args.out):
            log.info("wrote %s", path)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        for name, rows in tables.items():
            sys.stdout.write(f"# {name}\n")
            w.writerows(rows)
    return 0


def _wire_config(cfg: hs.SweepConfig) -> hs.SweepConfig:
    # live links lose whole datagrams
    return replace(cfg, channel=replace(cfg.channel, mode=PACKET_LEVEL))


def cmd_serve(args) -> int:
    cfg = _wire_config(_config(args))
    dep, _ = _load_deployment(args, cfg)
    server = wire.Server(
        dep,
        wire.ServerConfig(
            bind=args.bind,
            deadline_ms=args.deadline_ms,
            loss_rate=args.loss_rate,
            max_messages=args.max_messages,
            idle_timeout_s=args.idle_timeout,
            log_path=args.log,
        ),
    )
    try:
        records = server.serve()
    except KeyboardInterrupt:
        records = server.records
    stats = server.reassembler.stats
    log.info(
        "served %d messages (%d datagrams, %d discarded, %d late)",
        len(records),
        stats.datagrams,
        stats.discarded,
        stats.late,
    )
    return 0


def cmd_send(args) -> int:
    cfg = _wire_config(_config(args))
    dep, _ = _load_deployment(args, cfg, float32_messages=True)
    _, test = hs.load_datasets(cfg.dataset)
    features = test.features[: args.limit] if args.limit else test.features
    stats = wire.send(
        dep,
        features,
        wire.SenderConfig(args.target, args.loss_inject, args.rate, args.seed, args.first_message_id),
    )
    log.info("sent %d messages: %d datagrams, %d dropped by injection", stats.messages, stats.datagrams, stats.dropped)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lossydi", description="Packet-loss-resilient split inference toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON sweep config (dataset, architecture, training, channel)")
        return p

    p = add("pretrain", cmd_pretrain, "train the base network on clean data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = add("comtune", cmd_comtune, "fine-tune a base network with dropout and an optional codec")
    p.add_argument("--base", required=True, help="base network file written by pretrain")
    p.add_argument("--r", type=float, required=True, help="dropout rate at the split point")
    p.add_argument("--codec", choices=[hs.NO_CODEC, hs.QUANT, hs.PCA], default=hs.NO_CODEC)
    p.add_argument("--message-bytes", type=int, help="message budget for the codec")
    p.add_argument("--division-index", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="deployment directory")

    p = add("simulate", cmd_simulate, "evaluate a deployment over the simulated link")
    p.add_argument("--model", required=True, help="deployment directory")
    p.add_argument("--codec", help="codec file overriding the deployment's")
    p.add_argument("--loss-rate", type=float, action="append", help="repeatable; defaults to the config's list")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default stdout)")

    p = add("sweep", cmd_sweep, "run the full arm x loss-rate x seed grid")
    p.add_argument("--trials", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.add_argument("--summary", help="also write a per-(arm, p) mean/std table")

    p = sub.add_parser("analytics", help="received-packet and latency tables for a message size")
    p.set_defaults(func=cmd_analytics)
    p.add_argument("--message-bytes", type=int, required=True)
    p.add_argument("--loss-rate", type=float, required=True)
    p.add_argument("--payload", type=int, default=100)
    p.add_argument("--throughput", type=float, default=9.0e6, help="bits per second")
    p.add_argument("--k-max", type=int)
    p.add_argument("--out", help="directory for the CSV tables (default stdout)")

    p = add("serve", cmd_serve, "edge server: receive datagrams, reassemble, predict")
    p.add_argument("--model", required=True)
    p.add_argument("--codec")
    p.add_argument("--bind", default="127.0.0.1:9000", help="address:port")
    p.add_argument("--deadline-ms", type=float, default=100.0)
    p.add_argument("--loss-rate", type=float, default=0.0, help="p used for 1/(1-p) compensation")
    p.add_argument("--max-messages", type=int)
    p.add_argument("--idle-timeout", type=float, help="stop after this many idle seconds")
    p.add_argument("--log", help="results CSV, one row per message")

    p = add("send", cmd_send, "device agent: stream test rows as datagrams")
    p.add_argument("--model", required=True)
    p.add_argument("--codec")
    p.add_argument("--target", default="127.0.0.1:9000", help="address:port")
    p.add_argument("--loss-inject", type=float, default=0.0)
    p.add_argument("--rate", type=float, default=500.0, help="messages per second, 0 for unpaced")
    p.add_argument("--limit", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--first-message-id", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"lossydi {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
