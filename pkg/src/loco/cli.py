"""``loco`` command line: gen-data, train, eval, curves.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric fault.
Runs are written to ``$LOCO_RUN_ROOT/<name>/`` (default ``./runs``).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import MISSING, fields
from pathlib import Path

import yaml

from .datasets import (SynthConfig, generate, load_folder, load_manifest, load_split, save_dataset,
                       synth_manifest_extra)
from .metrics import evaluate
from .net import build_model, load_checkpoint
from .trainer import VARIANTS, TrainConfig, apply_variant, export_embeddings, run
from .types import DegenerateStateError, LocoError, NumericFault

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("loco")


class UsageError(Exception):
    pass


def run_root() -> Path:
    return Path(os.environ.get("LOCO_RUN_ROOT", "runs"))


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(args) -> int:
    cfg = SynthConfig(image_size=args.image_size, contrast_delta=args.contrast,
                      minority_fraction=args.minority, edge_blur=args.edge_blur,
                      noise_sigma=args.noise, seed=args.seed)
    pairs = generate(cfg, args.count + args.val_count)
    names = [f"{i:05d}" for i in range(len(pairs))]
    splits = ["train"] * args.count + ["val"] * args.val_count
    out = save_dataset(pairs, args.out, names, splits, synth_manifest_extra(cfg))
    print(f"wrote {args.count} train + {args.val_count} val pairs to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def _config_flag(f) -> str:
    return "--" + f.name.replace("_", "-")


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig field; defaults stay None so file values are not overridden."""
    group = parser.add_argument_group("training config (keys of the config file)")
    for f in fields(TrainConfig):
        default = f.default if f.default is not MISSING else None
        help_text = f"(default: {default!r})"
        if isinstance(default, bool):
            group.add_argument(_config_flag(f), dest=f.name, action=argparse.BooleanOptionalAction,
                               default=None, help=help_text)
        elif isinstance(default, tuple):
            group.add_argument(_config_flag(f), dest=f.name, type=int, nargs="+", default=None,
                               metavar="C", help=help_text)
        else:
            group.add_argument(_config_flag(f), dest=f.name, type=type(default), default=None,
                               help=help_text)


def build_config(args) -> TrainConfig:
    data = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise UsageError(f"{path}: expected a mapping of config keys")
    try:
        cfg = TrainConfig.from_dict(data)
        if args.variant:
            cfg = apply_variant(cfg, args.variant)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)
                 if getattr(args, f.name) is not None}
    return TrainConfig.from_dict({**cfg.to_dict(), **overrides})


def _has_split(root: str, split: str) -> bool:
    return any(f.get("split") == split for f in load_manifest(root).get("files") or [])


def _load(root: str, split: str):
    """Pairs of ``split`` when the manifest assigns it, otherwise every pair under ``root``."""
    if _has_split(root, split):
        return load_split(root, split)
    return load_folder(Path(root) / "images", Path(root) / "masks")


def _load_train_val(args):
    if not Path(args.data).exists():
        raise UsageError(f"dataset not found: {args.data}")
    train = _load(args.data, "train")
    if args.val:
        val = _load(args.val, "val")
    else:
        val = load_split(args.data, "val") if _has_split(args.data, "val") else []
    if not train:
        raise UsageError(f"no training pairs found under {args.data}")
    if not val:
        raise UsageError("no validation pairs found (use --val or a manifest with a 'val' split)")
    return train, val


def cmd_train(args) -> int:
    cfg = build_config(args)
    train, val = _load_train_val(args)
    run_dir = run_root() / cfg.name
    extra = {"data": str(Path(args.data).resolve()),
             "val": str(Path(args.val).resolve()) if args.val else None,
             "variant": args.variant}
    arts = run(cfg, train, val, run_dir, resume=args.resume, extra_manifest=extra)
    print(f"run {cfg.name}: best epoch {arts.best_epoch}")
    print(arts.final_report.to_text())
    print(f"artifacts in {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    ck_path = Path(args.checkpoint)
    if not ck_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ck_path}")
    data = _load(args.data, args.split)
    if not data:
        raise UsageError(f"no evaluation pairs found under {args.data}")
    ck = load_checkpoint(ck_path)
    cfg = TrainConfig.from_dict(ck["config"]) if "config" in ck else TrainConfig()
    model = build_model(ck["arch"])
    model.load_state_dict(ck["student"])
    report = evaluate(model, data, ck["arch"].num_classes, cfg.nsd_tolerance, cfg.include_background)
    out = Path(args.out) if args.out else ck_path.parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    (out / "report.txt").write_text(report.to_text() + "\n")
    print(report.to_text())
    if args.export_embeddings:
        from .lcc import Projector
        projector = Projector(ck["arch"].feature_dim, cfg.embedding_dim)
        projector.load_state_dict(ck["projector"])
        path = export_embeddings(model, projector, data, args.export_embeddings)
        print(f"embeddings written to {path}")
    return EXIT_OK


# ---------------------------------------------------------------- curves

def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_tidy(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)


def curve_tables(run_dir: Path) -> dict[str, list[dict]]:
    metrics_path = run_dir / "metrics.csv"
    if not metrics_path.exists():
        raise FileNotFoundError(f"missing {metrics_path}")
    tables = {"interclass": [{"epoch": r["epoch"], "value": r["interclass_sim"]}
                             for r in _read_csv(metrics_path)]}
    th_path = run_dir / "thresholds.csv"
    if th_path.exists():
        rows = _read_csv(th_path)
        classes = sorted(int(c[2:]) for c in (rows[0].keys() if rows else []) if c.startswith("T_"))
        dynamic = any(r["t_global"] != "" for r in rows)
        thr, util = [], []
        for r in rows:
            for c in classes:
                thr.append({"epoch": r["epoch"], "class": c, "series": "threshold", "value": r[f"T_{c}"]})
                if dynamic:
                    thr.append({"epoch": r["epoch"], "class": c, "series": "local_confidence",
                                "value": r[f"t_local_{c}"]})
                    util.append({"epoch": r["epoch"], "class": c, "series": "cdf",
                                 "value": r[f"util_{c}"]})
                util.append({"epoch": r["epoch"], "class": c, "series": "fixed",
                             "value": r[f"util_fixed_{c}"]})
            if dynamic:
                thr.append({"epoch": r["epoch"], "class": "all", "series": "global",
                            "value": r["t_global"]})
        tables["thresholds"] = thr
        tables["utilization"] = [u for u in util if u["value"] != ""]
    return tables


def cmd_curves(args) -> int:
    run_dir = Path(args.run)
    tables = curve_tables(run_dir)
    out = Path(args.out) if args.out else run_dir / "curves"
    out.mkdir(parents=True, exist_ok=True)
    columns = {"interclass": ["epoch", "value"],
               "thresholds": ["epoch", "class", "series", "value"],
               "utilization": ["epoch", "class", "series", "value"]}
    for name, rows in tables.items():
        _write_tidy(out / f"{name}.csv", columns[name], rows)
        print(f"wrote {out / f'{name}.csv'} ({len(rows)} rows)")
    if args.plot:
        from . import plotting
        plotting.plot_interclass(tables["interclass"], out / "interclass.png")
        if "thresholds" in tables:
            plotting.plot_thresholds([r for r in tables["thresholds"] if r["class"] != "all"],
                                     out / "thresholds.png")
            plotting.plot_utilization(tables["utilization"], out / "utilization.png")
        print(f"figures written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loco", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic low-contrast dataset")
    g.add_argument("--count", type=int, default=200, help="training images")
    g.add_argument("--val-count", type=int, default=50, help="validation images")
    g.add_argument("--contrast", type=float, default=0.1, help="intensity gap between classes")
    g.add_argument("--minority", type=float, default=0.05, help="target benign pixel share")
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--edge-blur", type=float, default=1.5)
    g.add_argument("--noise", type=float, default=0.03)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model (ablation variants m1..m7)")
    t.add_argument("--data", required=True, help="dataset root (images/, masks/, manifest.json)")
    t.add_argument("--val", help="validation dataset root (default: 'val' split of --data)")
    t.add_argument("--config", help="YAML file with TrainConfig keys")
    t.add_argument("--variant", choices=sorted(VARIANTS), type=str.lower,
                   help="ablation preset; explicit flags override it")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset root")
    e.add_argument("--split", default="val", help="manifest split to evaluate")
    e.add_argument("--out", help="report directory (default: <checkpoint dir>/eval)")
    e.add_argument("--export-embeddings", metavar="NPZ", help="also save pixel embeddings")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("curves", help="export threshold, utilization and similarity curves")
    c.add_argument("--run", required=True, help="run directory")
    c.add_argument("--out", help="output directory (default: <run>/curves)")
    c.add_argument("--plot", action="store_true", help="also render PNG figures")
    c.set_defaults(func=cmd_curves)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"loco {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericFault, DegenerateStateError) as exc:
        print(f"loco {args.command}: numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LocoError, FileNotFoundError, OSError) as exc:
        print(f"loco {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
