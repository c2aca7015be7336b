"""Command-line entry point: ``moonsparse {train,eval-ood,theory-sim,export-features}``.

Exit codes: 0 ok, 2 configuration, 3 numerical abort, 4 integrity.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .data import Dataset, DataConfigError, IdxFormatError, IdxConsistencyError, IdxLengthError
from .data import load_mnist, parse_idx, synth_gm, two_gaussian_spec
from .network import features
from .pipeline import evaluate_ood, prepare_data, run_training, theory_block, theory_rows, THEORY_COLUMNS
from .rng import SeededRng
from .trainer import NumericalAbort

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INTEGRITY = 0, 2, 3, 4
EPOCH_COLUMNS = ("epoch", "train_loss", "val_acc", "w", "sparsity", "wall_ms", "flops")
OOD_COLUMNS = ("detector", "ood_set", "auroc", "fpr95", "aupr", "accuracy", "ece")

log = logging.getLogger("moonsparse")


class IntegrityError(RuntimeError):
    pass


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue().encode("utf-8")


def write_csv(path, header, rows):
    checkpoint.atomic_write(path, csv_bytes(header, rows))


def epoch_rows(logs):
    return [(l.epoch, l.train_loss, l.val_accuracy, l.w, l.sparsity, l.wall_ms, l.flops) for l in logs]


# ------------------------------------------------------------------ commands

def cmd_train(args) -> int:
    rc = load_config(args.config)
    out = Path(args.out)
    bundle = prepare_data(rc)
    logs = []
    try:
        result = run_training(rc, bundle, on_epoch=logs.append)
    except NumericalAbort:
        write_csv(out / "epoch_log.csv", EPOCH_COLUMNS, epoch_rows(logs))
        raise
    digest = rc.digest()
    checkpoint.save(out / "checkpoint", result.net, digest)
    checkpoint.save(out / "checkpoint-raw", result.raw_net, digest)
    write_csv(out / "epoch_log.csv", EPOCH_COLUMNS, epoch_rows(result.logs))
    checkpoint.atomic_write(out / "config-echo", rc.canonical_text().encode("utf-8"))
    last = result.logs[-1] if result.logs else None
    if last is not None:
        log.info("trained %d epochs: loss %.4f, val acc %.4f, sparsity %.4f",
                 len(result.logs), last.train_loss, last.val_accuracy, last.sparsity)
    return EXIT_OK


def _load_checked(ckpt_path, rc, force: bool):
    try:
        net, digest = checkpoint.load(ckpt_path)
    except (OSError, CheckpointError) as exc:
        raise IntegrityError(f"cannot load checkpoint {ckpt_path}: {exc}") from exc
    if digest != rc.digest():
        msg = f"checkpoint {ckpt_path} was trained under a different seed/dataset/model config"
        if not force:
            raise IntegrityError(msg + " (use --force to evaluate anyway)")
        log.warning("%s; continuing because of --force", msg)
    return net


def cmd_eval_ood(args) -> int:
    rc = load_config(args.config)
    if not rc["ood.sets"]:
        raise ConfigError("ood.sets is empty; list at least one OOD set")
    net = _load_checked(args.ckpt, rc, args.force)
    rows, (acc, ece_val), _ = evaluate_ood(rc, net)
    table = [(*r, None, None) for r in rows]
    table.append(("id-metrics", None, None, None, None, acc, ece_val))
    write_csv(args.out, OOD_COLUMNS, table)
    return EXIT_OK


def cmd_theory_sim(args) -> int:
    rc = load_config(args.config)
    rows = []
    for s in range(rc["theory.seeds"]):
        block = theory_block(rc, rc["seed"] + s)
        if block.skipped:
            log.info("seed %d: skipped %d anchors with too few ball samples", block.seed, block.skipped)
        rows.extend(theory_rows(block))
    write_csv(args.out, THEORY_COLUMNS, rows)
    return EXIT_OK


def parse_data_spec(spec: str, input_dim: int) -> Dataset:
    """Resolve ``--data`` for export-features.

    Forms: ``idx:<images>:<labels>``, ``mnist:<dir>:<train|test>``,
    ``gm:<n per class>:<seed>[:<separation>[:<sigma>]]`` and
    ``uniform:<n>:<seed>`` (unit box). Mixture and uniform inputs take the
    checkpoint's input dimension.
    """
    kind, _, rest = spec.partition(":")
    parts = rest.split(":") if rest else []
    try:
        if kind == "idx" and len(parts) == 2:
            return parse_idx(parts[0], parts[1])
        if kind == "mnist" and len(parts) == 2:
            return load_mnist(parts[0], parts[1])
        if kind == "gm" and 2 <= len(parts) <= 4:
            sep = float(parts[2]) if len(parts) > 2 else 1.0
            sigma = float(parts[3]) if len(parts) > 3 else 1.0 / math.sqrt(2.0 * math.pi)
            gm = two_gaussian_spec(sep, sigma, input_dim)
            return synth_gm(gm, int(parts[0]), SeededRng(int(parts[1])))
        if kind == "uniform" and len(parts) == 2:
            n = int(parts[0])
            u = SeededRng(int(parts[1])).uniform(n * input_dim).reshape(n, input_dim)
            return Dataset(u, np.ones(n, dtype=np.int64), "uniform", 1)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        raise ConfigError(f"--data {spec!r}: {exc}") from exc
    raise ConfigError(f"--data {spec!r}: expected idx:IMG:LBL, mnist:DIR:SPLIT, gm:N:SEED[:SEP[:SIGMA]] "
                      "or uniform:N:SEED")


def cmd_export_features(args) -> int:
    try:
        net, _ = checkpoint.load(args.ckpt)
    except (OSError, CheckpointError) as exc:
        raise IntegrityError(f"cannot load checkpoint {args.ckpt}: {exc}") from exc
    data = parse_data_spec(args.data, net.input_dim)
    if data.dim != net.input_dim:
        raise ConfigError(f"--data has {data.dim} input dims, checkpoint expects {net.input_dim}")
    feats = features(net, data.inputs) if len(data) else np.zeros((0, net.layer_dims[-2]))
    header = ("label", *(f"f{i}" for i in range(feats.shape[1])))
    rows = ([int(y), *map(float, f)] for y, f in zip(data.labels, feats))
    write_csv(args.out, header, rows)
    return EXIT_OK


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moonsparse", description="Sparse K+1 training, OOD evaluation and mixture probes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write checkpoints and logs")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-ood", help="score ID and OOD sets with post-hoc detectors")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--force", action="store_true", help="evaluate despite a config digest mismatch")
    p.set_defaults(func=cmd_eval_ood)

    p = sub.add_parser("theory-sim", help="paired CE/MOON unreliability probes on a Gaussian mixture")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="CSV report path")
    p.set_defaults(func=cmd_theory_sim)

    p = sub.add_parser("export-features", help="write penultimate features as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="idx:IMG:LBL | mnist:DIR:SPLIT | gm:N:SEED[:SEP[:SIGMA]] | uniform:N:SEED")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_features)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataConfigError, IdxFormatError, IdxConsistencyError, IdxLengthError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
