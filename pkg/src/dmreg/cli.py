"""Command-line entry point: ``dmreg synth | train | register | evaluate | gradcheck``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure (training divergence or a failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig, toy_config
from .gradcheck import THRESHOLDS, model_suite, operation_suite, summarize
from .synthetic import gen_synthetic_pair
from .trainer import PairDataset, TrainingDiverged, evaluate_pair, register, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

PAIR_FILES = ("fixed", "moving", "fixed_labels", "moving_labels", "u_gt")
MANIFEST_COLUMNS = ("pair_id", "moving", "fixed", "moving_labels", "fixed_labels")

log = logging.getLogger("dmreg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- synth -------------------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        pair = gen_synthetic_pair(args.seed, args.size, args.structures, args.sigma, args.max_disp)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {"fixed": pair.fixed, "moving": pair.moving, "fixed_labels": pair.fixed_labels,
              "moving_labels": pair.moving_labels, "u_gt": pair.u_gt}
    for role in PAIR_FILES:
        path = out / f"{role}.dmrv"
        io.write_volume(arrays[role], path)
        print(f"{role},{path}")
    return EXIT_OK


# -- train -------------------------------------------------------------------------

def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    return RunConfig.from_text(text)


def load_dataset(data_dir) -> PairDataset:
    """Pair directories (``moving.dmrv`` + ``fixed.dmrv``, used in both orders) or a flat set of volumes."""
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist")
    pair_dirs = sorted(p.parent for p in root.rglob("moving.dmrv") if (p.parent / "fixed.dmrv").exists())
    if pair_dirs:
        pairs = [(io.read_volume(d / "moving.dmrv"), io.read_volume(d / "fixed.dmrv")) for d in pair_dirs]
        return PairDataset(pairs=pairs + [(f, m) for m, f in pairs])
    vols = []
    for path in sorted(root.glob("*.dmrv")):
        v = io.read_volume(path)
        if v.ndim == 3 and v.dtype == np.float32:
            vols.append(v)
    if len(vols) < 2:
        raise ValueError(f"{root} holds fewer than two intensity volumes")
    return PairDataset(volumes=vols)


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    updates = {}
    if args.data_dir:
        updates["data_dir"] = args.data_dir
    if args.out_dir:
        updates["out_dir"] = args.out_dir
    if args.iterations is not None:
        updates["iterations"] = args.iterations
    cfg = cfg.replace(**updates) if updates else cfg
    if not cfg.data_dir or not cfg.out_dir:
        raise UsageError("train needs a data directory and an output directory (flags or config)")
    try:
        cfg.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    dataset = load_dataset(cfg.data_dir)
    result = train(cfg, dataset, out_dir=cfg.out_dir, resume=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"checkpoint,{result.checkpoint}")
    print(f"log,{Path(cfg.out_dir) / 'train_log.csv'}")
    if last:
        print(f"final_total,{last['total']:.6f}")
    return EXIT_OK


# -- register / evaluate ------------------------------------------------------------

def cmd_register(args) -> int:
    moving = io.read_volume(args.moving)
    fixed = io.read_volume(args.fixed)
    labels = io.read_volume(args.labels) if args.labels else None
    reg = register(args.ckpt, moving, fixed, labels)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_volume(reg.u_final.astype(np.float32), out / "field.dmrv", io.FIELD)
    io.write_volume(reg.warped.astype(np.float32), out / "warped.dmrv", io.FLOAT32)
    print(f"field,{out / 'field.dmrv'}")
    print(f"warped,{out / 'warped.dmrv'}")
    if reg.warped_labels is not None:
        io.write_volume(reg.warped_labels.astype(np.uint16), out / "warped_labels.dmrv", io.LABELS)
        print(f"warped_labels,{out / 'warped_labels.dmrv'}")
    with open(out / "registration.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["moving", "fixed", "wall_time_s"])
        w.writerow([args.moving, args.fixed, f"{reg.wall_time_s:.6f}"])
    print(f"wall_time_s,{reg.wall_time_s:.6f}")
    return EXIT_OK


def read_manifest(path) -> list[dict[str, str]]:
    base = Path(path).parent
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"pairs manifest {path} has no rows")
    missing = [c for c in MANIFEST_COLUMNS if c not in rows[0]]
    if missing:
        raise ValueError(f"pairs manifest {path} lacks columns {missing}")
    for row in rows:
        for col in MANIFEST_COLUMNS[1:]:
            p = Path(row[col])
            row[col] = str(p if p.is_absolute() else base / p)
    return rows


def metric_columns(label_ids) -> list[str]:
    return (["pair_id", "mean_dice"] + [f"dice_{k}" for k in sorted(label_ids)]
            + ["pct_nonpos_jac", "std_jac", "wall_time_s"])


def cmd_evaluate(args) -> int:
    rows = []
    for entry in read_manifest(args.pairs_manifest):
        row = evaluate_pair(args.ckpt, *(io.read_volume(entry[c]) for c in MANIFEST_COLUMNS[1:]))
        row["pair_id"] = entry["pair_id"]
        rows.append(row)
    labels = {int(k[5:]) for r in rows for k in r if k.startswith("dice_")}
    cols = metric_columns(labels)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    mean = float(np.mean([r["mean_dice"] for r in rows]))
    print(f"pairs,{len(rows)}")
    print(f"mean_dice,{mean:.6f}")
    print(f"csv,{args.out}")
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------------------

OP_GROUPS = {
    "warp": ("warp_trilinear", "upsample_field"),
    "objectives": ("ncc_local", "smoothness", "bending_energy"),
    "deformer": ("deformer_combine",),
}


def _op_group(name: str) -> str:
    for group, ops in OP_GROUPS.items():
        if name in ops:
            return group
    return "tensor_engine"


def cmd_gradcheck(args) -> int:
    dtype = "float64" if args.dtype == "64" else "float32"
    cfg = load_config(args.config) if args.config else toy_config()
    cfg = cfg.replace(dtype=dtype)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    threshold = THRESHOLDS[dtype]
    ops = summarize(operation_suite(dtype), _op_group)
    model = {f"model.{k}": v for k, v in summarize(model_suite(cfg, size=args.size)).items()}
    worst = 0.0
    for name, err in {**ops, **model}.items():
        print(f"{name},{err:.3e}")
        worst = max(worst, err)
    status = "pass" if worst < threshold else "FAIL"
    print(f"max,{worst:.3e},threshold,{threshold:.0e},{status}")
    return EXIT_OK if worst < threshold else EXIT_NUMERIC


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dmreg", description="Deformer-based multi-scale registration on desk-scale data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic labeled pair")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--structures", type=int, default=5)
    s.add_argument("--sigma", type=float, default=12.0)
    s.add_argument("--max-disp", type=float, default=3.0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="unsupervised training")
    t.add_argument("--config")
    t.add_argument("--data-dir")
    t.add_argument("--out-dir")
    t.add_argument("--iterations", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="register one pair with a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--fixed", required=True)
    r.add_argument("--labels", help="moving label map to warp along")
    r.add_argument("--out-dir", default=".")
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("evaluate", help="metrics CSV over a pairs manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--pairs-manifest", required=True,
                   help="CSV with columns " + ",".join(MANIFEST_COLUMNS))
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--config")
    g.add_argument("--dtype", choices=("32", "64"), default="64")
    g.add_argument("--size", type=int, default=16)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (io.FormatError, ConfigError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
