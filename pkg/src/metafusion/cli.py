"""Command line entry point: ``metafusion {gen,run,ablation,theory,presets}``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import experiments as xp
from . import verification as vf
from .datagen import export_dataset, generate_synthetic
from .errors import MetaFusionError


def _emit(text: str, path: Optional[str]):
    if path is None:
        sys.stdout.write(text)
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _sidecar(path: str, tag: str) -> str:
    p = Path(path)
    return str(p.with_name(f"{p.stem}.{tag}{p.suffix or '.csv'}"))


def _config(args) -> xp.ExperimentConfig:
    cfg = xp.load_config(args.config) if args.config else xp.ExperimentConfig()
    if getattr(args, "setting", None):
        cfg = replace(cfg, setting=args.setting, synth=None)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "reps", None) is not None:
        cfg = replace(cfg, repetitions=args.reps)
    if args.desk_scale:
        cfg = cfg.desk()
    if getattr(args, "jobs", None) is not None:
        cfg = replace(cfg, jobs=args.jobs)
    if getattr(args, "mode", None):
        cfg = replace(cfg, ablation=replace(cfg.ablation, mode=args.mode))
    if args.out is None and cfg.output is not None:
        args.out = cfg.output
    return cfg.validate()


def _write_tables(rows, args):
    _emit(xp.rows_csv(rows), args.out)
    if args.out is not None:
        _emit(xp.summary_csv(rows), _sidecar(args.out, "summary"))
        _emit(xp.timing_csv(rows), _sidecar(args.out, "timing"))
    else:
        sys.stderr.write(xp.summary_csv(rows))


def cmd_gen(args):
    cfg = _config(args)
    data = generate_synthetic(cfg.synth_for(0))
    _emit(export_dataset(data), args.out)


def cmd_run(args):
    rows, _ = xp.run_experiment(_config(args))
    _write_tables(rows, args)


def cmd_ablation(args):
    rows, _ = xp.run_ablation(_config(args))
    _write_tables(rows, args)


def cmd_theory(args):
    checks = vf.theory_report(args.seed or 0)
    _emit(vf.report_csv(checks), args.out)
    return 0 if all(c.passed for c in checks) else 1


def cmd_presets(args):
    _emit(xp.presets_csv(), args.out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metafusion", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, reps=True):
        p.add_argument("--config", help="YAML experiment config (unknown keys are rejected)")
        p.add_argument("--seed", type=int, help="base seed; repetition r uses seed + r")
        p.add_argument("--out", help="output CSV path (default: stdout)")
        p.add_argument("--desk-scale", action="store_true",
                       help="use the -desk variant of the preset (n=500, observed dims / 4)")
        p.add_argument("--setting", help="preset name, e.g. 2.3 or 1.2-desk")
        if reps:
            p.add_argument("--reps", type=int, help="number of repetitions")
            p.add_argument("--jobs", type=int, help="worker processes for repetitions")

    p = sub.add_parser("gen", help="write one synthetic dataset")
    common(p, reps=False)
    p.set_defaults(fn=cmd_gen)
    p = sub.add_parser("run", help="run methods over repetitions")
    common(p)
    p.set_defaults(fn=cmd_run)
    p = sub.add_parser("ablation", help="aggregator or divergence-weight comparison")
    common(p)
    p.add_argument("--mode", choices=xp.ABLATION_MODES)
    p.set_defaults(fn=cmd_ablation)
    p = sub.add_parser("theory", help="numerical verification report")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_theory)
    p = sub.add_parser("presets", help="list preset settings")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_presets)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = args.fn(args)
    except MetaFusionError as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 2
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
