"""Throughput, memory and dense-equivalence table over window sizes."""

import argparse
from pathlib import Path

from sinkdistill.cli import BENCH_WINDOWS, cmd_cache_bench
from sinkdistill.config import ExperimentConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/cache-bench")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--long-len", type=int, default=256)
    args = p.parse_args()
    rows = cmd_cache_bench(ExperimentConfig(seed=args.seed), Path(args.out), BENCH_WINDOWS, args.long_len)
    print(f"{'window':>6} {'seq_len':>7} {'chunks/s':>10} {'bytes':>7} {'dense err':>10}")
    for r in rows:
        print(f"{r['window_size']:6d} {r['seq_len']:7d} {r['throughput']:10.0f} {r['memory_bytes']:7d} {r['dense_equiv_error']:10.1e}")


if __name__ == "__main__":
    main()
