"""Command-line entry points: datagen, train, eval, bench."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .datagen import DataError, SyntheticSpec, generate
from .experiment import (ExperimentPlan, bench_table, evaluation_report, format_log, plan_data,
                         read_split, run_bench, train_variant, write_split)
from .trainer import VARIANTS, load_checkpoint, save_checkpoint

logger = logging.getLogger("adsnet")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    name = os.environ.get("ADSNET_LOG_LEVEL", "error").lower()
    if name not in LOG_LEVELS:
        raise cfgmod.ConfigError(
            f"ADSNET_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _read_config(path) -> dict:
    if path is None:
        return {}
    return cfgmod.parse(Path(path).read_text(encoding="utf-8"))


def _load_plan(args) -> ExperimentPlan:
    plan = ExperimentPlan.from_dict(_read_config(args.config))
    if getattr(args, "data_dir", None):
        plan.data_dir = args.data_dir
    if getattr(args, "variant", None):
        plan.variants = (args.variant,)
    if getattr(args, "seed", None) is not None:
        plan.seeds = (args.seed,)
    return plan


def cmd_datagen(args) -> int:
    cfg = _read_config(args.config)
    for key in cfg:
        if not key.startswith("data."):
            raise cfgmod.ConfigError(f"unknown config key {key!r}")
    spec = cfgmod.build(SyntheticSpec, cfgmod.section(cfg, "data"), "data.")
    if args.seed is not None:
        spec = spec.replace(seed=args.seed)
    write_split(generate(spec), spec.schema(), args.out_dir)
    return 0


def cmd_train(args) -> int:
    plan = _load_plan(args)
    variant, seed = plan.variants[0], plan.seeds[0]
    split, schema = plan_data(plan, seed)
    result = train_variant(split, schema, plan.config.replace(seed=seed), variant)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", result)
    (out / "metrics.log").write_text(format_log(result.reports), encoding="utf-8")
    (out / "plan.cfg").write_text(cfgmod.serialize(plan.to_dict()), encoding="utf-8")
    if not plan.data_dir:
        write_split(split, schema, out / "data")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    result = load_checkpoint(ckpt)
    split, _ = read_split(args.data_dir, result.arch.schema.embedding_dim)
    data = split.validation if args.split == "val" else split.test
    edges = tuple(float(e) for e in args.slice_edges.split(","))
    report = evaluation_report(result, data, split.train, edges)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(report, encoding="utf-8")
    else:
        sys.stdout.write(report)
    return 0


def cmd_bench(args) -> int:
    plan = _load_plan(args)
    runs = run_bench(plan, jobs=args.jobs)
    table = bench_table(plan, runs)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(table, encoding="utf-8")
        for r in runs:
            run_dir = out / "runs" / f"{r.variant}_seed{r.seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "metrics.log").write_text(r.log_text, encoding="utf-8")
            (run_dir / "report.csv").write_text(r.report_text, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adsnet",
                                     description="Cross-domain LTV prediction experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="write a synthetic train/val/test split as CSV")
    p.add_argument("--config", help="file with data.* keys")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train one variant; writes model.ckpt and metrics.log")
    p.add_argument("--config", help="plan file (plan.*, train.*, data.* keys)")
    p.add_argument("--data-dir", help="directory with train.csv, val.csv, test.csv, schema.cfg")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-domain and per-slice AUC/Gini report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", help="write report.csv here instead of stdout")
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--slice-edges", default="15")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run every variant and seed of a plan; print a table")
    p.add_argument("--config", help="plan file")
    p.add_argument("--data-dir")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except (cfgmod.ConfigError, DataError, OSError, ValueError, IndexError) as exc:
        print(f"adsnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
