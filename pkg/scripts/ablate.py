"""Sweep one ablation axis (alpha, beta or window) and print the table."""

import argparse
from pathlib import Path

from sinkdistill.cli import apply_preset, cmd_ablate
from sinkdistill.config import ExperimentConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("axis", choices=("alpha", "beta", "window"))
    p.add_argument("--grid", type=float, nargs="+", help="values to sweep (default: the full grid)")
    p.add_argument("--out", default="runs/ablate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int)
    args = p.parse_args()
    cfg = apply_preset(ExperimentConfig(seed=args.seed), "dynamics").with_overrides(distill__steps=args.steps)
    grid = [int(v) for v in args.grid] if args.grid and args.axis == "window" else args.grid
    for row in cmd_ablate(cfg, args.axis, Path(args.out) / args.axis, grid):
        print("  ".join(f"{k}={v:.4g}" for k, v in row.items()))


if __name__ == "__main__":
    main()
