"""Command line entry point.

Subcommands: gen (datasets only), run (full experiment grid), plot
(figures from a finished run), eval (re-score stored checkpoints).
Exit codes: 0 success, 2 configuration or usage error, 3 at least one
cell failed at runtime. GSTUDA_THREADS caps torch CPU threads.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import torch

from .config import ConfigError, ExperimentConfig, load_config
from .data import load_dataset
from .experiment import _fmt, generate_datasets, run_experiment
from .metrics import METRIC_NAMES, evaluate
from .plots import plot_run
from .translator import TranslatorModel

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _apply_threads():
    raw = os.environ.get("GSTUDA_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"GSTUDA_THREADS must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seeds", None):
        try:
            seeds = tuple(int(s) for s in args.seeds.split(","))
        except ValueError:
            raise ConfigError(f"--seeds expects comma-separated integers, got {args.seeds!r}")
        cfg = replace(cfg, seeds=seeds)
    if getattr(args, "methods", None):
        cfg = replace(cfg, methods=tuple(m.strip() for m in args.methods.split(",")))
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def cmd_gen(args) -> int:
    cfg = _load_cfg(args)
    out = args.out or os.path.join(cfg.output_dir, "datasets")
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        print(f"error: {out} is not empty; pass --force to overwrite", file=sys.stderr)
        return EXIT_CONFIG
    source_ds, target_ds = generate_datasets(cfg, out)
    print(f"wrote {len(source_ds)} source and {len(target_ds)} target slices to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    try:
        result = run_experiment(cfg, cfg.output_dir, force=args.force)
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"report: {result.report_csv}")
    if result.failures:
        for method, seed, msg in result.failures:
            print(f"cell failure: {method} seed {seed}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_plot(args) -> int:
    if not os.path.isdir(args.run):
        print(f"error: no run directory at {args.run}", file=sys.stderr)
        return EXIT_CONFIG
    written = plot_run(args.run, args.out)
    if not written:
        print(f"error: {args.run} holds no plottable artifacts", file=sys.stderr)
        return EXIT_RUNTIME
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    """Re-score every stored final checkpoint against the stored target set."""
    run_dir = args.run
    target_dir = os.path.join(run_dir, "datasets", "target")
    cells_dir = os.path.join(run_dir, "cells")
    if not (os.path.isdir(target_dir) and os.path.isdir(cells_dir)):
        print(f"error: {run_dir} lacks datasets/target or cells", file=sys.stderr)
        return EXIT_CONFIG
    target_ds = load_dataset(target_dir)
    out_path = args.out or os.path.join(run_dir, "eval_report.csv")
    rows = []
    for name in sorted(os.listdir(cells_dir)):
        ckpt = os.path.join(cells_dir, name, "final.ckpt")
        if not os.path.exists(ckpt):
            continue
        model = TranslatorModel.load(ckpt)
        report = evaluate({name: model}, target_ds)
        for metric in METRIC_NAMES:
            rows.append((name, metric, report.per_method[name][metric]))
    if not rows:
        print(f"error: no final checkpoints under {cells_dir}", file=sys.stderr)
        return EXIT_RUNTIME
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("cell", "metric", "value"))
        for cell, metric, value in rows:
            w.writerow((cell, metric, _fmt(value)))
    print(f"wrote {out_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gstuda",
                                     description="self-training domain adaptation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate and persist the two-domain datasets")
    gen.add_argument("--config", help="flat key=value config file")
    gen.add_argument("--out", help="dataset directory")
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(fn=cmd_gen)

    run = sub.add_parser("run", help="run the experiment grid")
    run.add_argument("--config", help="flat key=value config file")
    run.add_argument("--out", help="output directory (overrides run.output_dir)")
    run.add_argument("--seeds", help="comma-separated seed override")
    run.add_argument("--methods", help="comma-separated method override")
    run.add_argument("--force", action="store_true")
    run.set_defaults(fn=cmd_run)

    plot = sub.add_parser("plot", help="render figures from a finished run")
    plot.add_argument("--run", required=True)
    plot.add_argument("--out")
    plot.set_defaults(fn=cmd_plot)

    ev = sub.add_parser("eval", help="re-score stored checkpoints")
    ev.add_argument("--run", required=True)
    ev.add_argument("--out")
    ev.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_threads()
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
