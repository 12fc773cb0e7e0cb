"""Command-line entry point: one experiment per invocation."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bspline import fit_patch, parameterize_cloud
from .config import load_config
from .experiments import oracle_grid, run_ablation, run_fixed_step_baseline, run_solve
from .meshio import load_mesh


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_("run", seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, run=replace(cfg.run, output_dir=str(Path(args.out).resolve())))
    return cfg


def _print_summary(summary: dict, keys=("terminated_by", "final_D", "avg_err_mm", "max_err_mm", "evals")):
    print(" ".join(f"{k}={summary[k]}" for k in keys if k in summary))


def cmd_solve(args):
    cfg = _load(args)
    _, summary = run_solve(cfg)
    _print_summary(summary)
    print(f"outputs in {cfg.output_dir}")


def cmd_ablate(args):
    cfg = _load(args)
    res = run_ablation(cfg, args.mode)
    for side, s in (("on", res.on_summary), ("off", res.off_summary)):
        print(side, end=": ")
        _print_summary(s, ("final_D", "avg_err_mm", "mean_eta", "mean_eta_waist", "evals"))
    print(f"outputs in {cfg.output_dir}")


def cmd_baseline(args):
    cfg = _load(args)
    _, summary = run_fixed_step_baseline(cfg, args.step)
    _print_summary(summary)
    print(f"outputs in {cfg.output_dir}")


def cmd_oracle(args):
    cfg = _load(args)
    res = oracle_grid(cfg, args.points)
    print(f"best_D={res.best_D!r} best_a={res.best_a.tolist()} cell_variation={res.cell_variation()!r}")
    print(f"outputs in {cfg.output_dir}")


def cmd_fit(args):
    mesh = load_mesh(args.mesh)
    uv = parameterize_cloud(mesh.vertices)
    patch = fit_patch(mesh.vertices, uv, args.ctrl_u, args.ctrl_v, args.regularization)
    print(f"fit_rms_mm={patch.fit_rms!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deformctl", description="Closed-loop shape control experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="hybrid solve on the configured target")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("ablate", help="paired on/off runs of one feature")
    p.add_argument("--mode", required=True, choices=("icp", "broyden", "normal"))
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("baseline", help="fixed-step incremental controller")
    p.add_argument("--step", required=True, type=float, choices=(1.0, 1.5, 2.0))
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("oracle", help="brute-force grid over the actuation box")
    p.add_argument("--config", required=True)
    p.add_argument("--points", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("fit", help="fit a B-spline patch to a mesh and print the RMS")
    p.add_argument("--mesh", required=True)
    p.add_argument("--ctrl-u", type=int, default=14)
    p.add_argument("--ctrl-v", type=int, default=14)
    p.add_argument("--regularization", type=float, default=1e-4)
    p.set_defaults(func=cmd_fit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError, ArithmeticError, np.linalg.LinAlgError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0
