"""Command-line runner: cache benchmark, distillation presets, ablations, rollouts.

Every command takes ``--config``, ``--seed`` and ``--out`` and writes its
artifacts under the output directory. All randomness comes from named
sub-streams of the root seed, so reruns reproduce every file except the
wall-clock throughput column of the cache benchmark.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .attention_cache import EmaSinkCache, dense_causal_attention
from .config import ExperimentConfig
from .distill import ChunkTeacher, RewardFunction, load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, DivergenceError
from .experiments import (
    clip_quality,
    eval_series,
    gaussian_problem,
    long_rollout,
    named_rng,
    sequence_problem,
)
from .distill import distill_loop
from .metrics import drift, dynamics_degree_batch, energy_distance
from .rollout import Generator, GeneratorConfig, StreamState, generate, switch_conditioning, write_sequence_csv

BENCH_WINDOWS = (5, 9, 17, 33)
ALPHA_GRID = (0.99, 0.9, 0.5)
BETA_GRID = (1.0, 2 / 3, 1 / 2, 1 / 3, 1 / 5)

# per-preset defaults applied when a preset is selected on the command line
PRESET_DEFAULTS = {
    "gaussian": dict(reward="none", steps=2000, batch=64, gen_lr=3e-3, lr_decay=0.95, eval_every=0),
    "gaussian-tilt": dict(reward="linear", steps=2000, batch=64, gen_lr=3e-3, lr_decay=0.95, eval_every=0),
    "dynamics": dict(reward="dynamics", steps=600, batch=32, gen_lr=5e-4, lr_decay=0.9, eval_every=60),
}


def apply_preset(cfg: ExperimentConfig, preset: str) -> ExperimentConfig:
    d = replace(cfg.distill, preset=preset, **PRESET_DEFAULTS[preset])
    return replace(cfg, distill=d)


def _reward(cfg: ExperimentConfig):
    kind = cfg.distill.reward
    if kind == "none":
        return None
    if kind == "dynamics" and cfg.distill.preset != "dynamics":
        raise ConfigError("the dynamics reward needs the dynamics preset", ["distill.reward"])
    return RewardFunction(kind, direction=tuple(cfg.data.direction))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


# -- cache-bench -----------------------------------------------------------------


class _BenchCell:
    """One (window, seq_len) cell: fixed random Q/K/V chunks and a timed streaming pass."""

    def __init__(self, cfg: ExperimentConfig, window: int, seq_len: int, rng):
        self.cache_cfg = replace(cfg.cache, window_size=window).build()
        t, width = self.cache_cfg.tokens_per_chunk, self.cache_cfg.width
        self.window, self.seq_len = window, seq_len
        self.ks = rng.standard_normal((seq_len, t, width))
        self.vs = rng.standard_normal((seq_len, t, width))
        self.qs = rng.standard_normal((seq_len, t, width))
        self.best = float("inf")

    def run(self):
        t = self.cache_cfg.tokens_per_chunk
        cache = EmaSinkCache(self.cache_cfg)
        start = time.perf_counter()
        for i in range(self.seq_len):
            cache.append_chunk(self.ks[i], self.vs[i], i * t)
            cache.attend(self.qs[i], np.arange(i * t, (i + 1) * t))
        self.best = min(self.best, time.perf_counter() - start)
        return cache

    def row(self, cache):
        err = float("nan")
        if self.seq_len <= self.window:
            c, width = self.cache_cfg, self.cache_cfg.width
            pos = np.arange(self.seq_len * c.tokens_per_chunk)
            q = self.qs.reshape(-1, width)
            k, v = self.ks.reshape(-1, width), self.vs.reshape(-1, width)
            dense = dense_causal_attention(q, k, v, pos, c.rope, n_heads=c.n_heads)
            err = float(np.max(np.abs(cache.attend(q, pos, use_sink=False) - dense)))
        return (self.window, self.seq_len, self.seq_len / self.best, cache.memory_footprint(), err)


def cmd_cache_bench(cfg: ExperimentConfig, out: Path, windows=BENCH_WINDOWS, long_len=256, repeats=9):
    """Streaming throughput, memory and dense-equivalence error per window size.

    Throughput is the best of ``repeats`` timed passes; the passes are
    interleaved across cells so slow drifts in machine load hit every cell.
    """
    rng = cfg.rng("cache-bench")
    cells = [_BenchCell(cfg, w, n, rng) for w in windows for n in sorted({max(1, w // 2), w, 2 * w, long_len})]
    caches = [None] * len(cells)
    for _ in range(repeats):
        for i, cell in enumerate(cells):
            caches[i] = cell.run()
    rows = [cell.row(cache) for cell, cache in zip(cells, caches)]
    out.mkdir(parents=True, exist_ok=True)
    header = ["window_size", "seq_len", "throughput", "memory_bytes", "dense_equiv_error"]
    _write_rows(out / "cache_bench.csv", header, [[_fmt(v) for v in r] for r in rows])
    return [dict(zip(header, r)) for r in rows]


# -- distill ---------------------------------------------------------------------


def _gaussian_run(cfg: ExperimentConfig, out: Path):
    d, data = cfg.distill, cfg.data
    mean, std = np.asarray(data.mean), np.asarray(data.std)
    gen, teacher, fake = gaussian_problem(mean, std, cfg.seed, d.fake_lr)
    reward = _reward(cfg)
    log = distill_loop(gen, teacher, fake, reward, d.build(), cfg.schedule.build(), cfg.rng("distill"), out / "log.jsonl")
    samples = gen.sample(4096, cfg.rng("samples")).x0
    target = mean.copy()
    if d.preset == "gaussian-tilt":
        # exp(a.x / beta) N(mu, diag(s^2)) is N(mu + s^2 a / beta, diag(s^2))
        target = mean + std**2 * np.asarray(data.direction) / d.beta
    teacher_samples = named_rng(cfg.seed, "teacher-samples").standard_normal((4096, len(mean))) * std + target
    gm, gcov = gen.moments()
    report = {
        "preset": d.preset,
        "target_mean": target.tolist(),
        "target_std": std.tolist(),
        "final_mean": gm.tolist(),
        "final_std": np.sqrt(np.diag(gcov)).tolist(),
        "mean_error": (gm - target).tolist(),
        "std_error": (np.sqrt(np.diag(gcov)) - std).tolist(),
        "energy_distance": energy_distance(samples, teacher_samples),
    }
    sections = {"generator": (gen.param_names(), gen.param_list()), "fake_score": (fake.param_names(), fake.param_list())}
    _write_rows(out / "samples.csv", [f"d{i}" for i in range(len(mean))], [[_fmt(v) for v in row] for row in samples])
    return log, sections, report


def build_sequence_problem(cfg: ExperimentConfig):
    dyn = cfg.data.dynamics(cfg.cache.tokens_per_chunk)
    return sequence_problem(
        cfg.cache.build(),
        dyn,
        cfg.schedule.build(),
        cfg.seed,
        cfg.distill.n_chunks,
        cfg.distill.hidden,
        cfg.distill.fake_lr,
    )


def _dynamics_run(cfg: ExperimentConfig, out: Path):
    d = cfg.distill
    task, teacher, fake = build_sequence_problem(cfg)
    evaluate = task.evaluator(batch=d.eval_batch)
    log = distill_loop(task, teacher, fake, _reward(cfg), d.build(), task.schedule, cfg.rng("distill"), out / "log.jsonl", evaluate)
    seqs = task.rollout(named_rng(cfg.seed, "samples").integers(2**62), 16)
    rows = []
    for s, seq in enumerate(seqs):
        for ci, chunk in enumerate(seq):
            for ti, tok in enumerate(chunk):
                rows.append([s, ci, ti] + [_fmt(v) for v in tok])
    _write_rows(out / "samples.csv", ["stream", "chunk_index", "token_index", "d0", "d1"], rows)
    series = eval_series(log)
    report = {
        "preset": d.preset,
        "dynamics_series": series,
        "dynamics_initial": series[0][1],
        "dynamics_final": series[-1][1],
    }
    gen = task.gen
    sections = {"generator": gen.state(), "fake_score": (fake.param_names(), fake.param_list())}
    return log, sections, report


def cmd_distill(cfg: ExperimentConfig, out: Path):
    """Run one preset end to end; writes log, checkpoint, samples and a report."""
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.save(cfg, out / "config.txt")
    run = _dynamics_run if cfg.distill.preset == "dynamics" else _gaussian_run
    log, sections, report = run(cfg, out)
    save_checkpoint(out / "checkpoint.bin", sections, {"preset": cfg.distill.preset, "config": cfgmod.to_dict(cfg)})
    report["steps"] = cfg.distill.steps
    _write_json(out / "report.json", report)
    return report


# -- ablate ----------------------------------------------------------------------


def long_horizon_metrics(cfg: ExperimentConfig, task, n_streams=16, n_chunks=60, chunks_per_clip=6):
    """Drift of per-clip teacher likelihood and dynamics degree over a long rollout."""
    seqs, conds = long_rollout(task, named_rng(cfg.seed, "long-rollout").integers(2**62), n_streams, n_chunks)
    teacher = ChunkTeacher(task.dynamics)
    clips = clip_quality(seqs, teacher, conds, chunks_per_clip)
    return drift(list(clips)), float(dynamics_degree_batch(seqs).mean())


def _ablate_cell(cfg: ExperimentConfig, out: Path):
    cmd_distill(cfg, out)
    task, _, _ = build_sequence_problem(cfg)
    sections, _ = load_checkpoint(out / "checkpoint.bin")
    task.gen.load_state(sections["generator"])
    return long_horizon_metrics(cfg, task)


def cmd_ablate(cfg: ExperimentConfig, axis: str, out: Path, grid=None):
    """Distill one dynamics run per grid value and report long-horizon metrics."""
    if axis not in ("alpha", "beta", "window"):
        raise ConfigError(f"unknown ablation axis {axis!r}", ["axis"])
    grid = tuple(grid or {"alpha": ALPHA_GRID, "beta": BETA_GRID, "window": BENCH_WINDOWS}[axis])
    base = cfg if cfg.distill.preset == "dynamics" else apply_preset(cfg, "dynamics")
    rows = []
    for value in grid:
        if axis == "alpha":
            cell = replace(base, cache=replace(base.cache, alpha=float(value)))
        elif axis == "window":
            cell = replace(base, cache=replace(base.cache, window_size=int(value)))
        else:
            cell = replace(base, distill=replace(base.distill, beta=float(value)))
        cell_dir = out / f"{axis}_{value:.6g}"
        drift_value, dyn = _ablate_cell(cell, cell_dir)
        row = {axis: value, "drift": drift_value, "dynamics_degree": dyn}
        if axis == "window":
            bench = cmd_cache_bench(cell, cell_dir, windows=(int(value),))
            row["throughput"] = bench[-1]["throughput"]
        rows.append(row)
    header = list(rows[0])
    _write_rows(out / f"ablate_{axis}.csv", header, [[_fmt(r[k]) for k in header] for r in rows])
    return rows


# -- rollout ---------------------------------------------------------------------


def cmd_rollout(cfg: ExperimentConfig, checkpoint, out: Path, n_chunks=20, switch_at=None, c_new=None, cond=0.0):
    """Stream chunks from a trained generator, optionally switching the condition."""
    path = Path(checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    sections, meta = load_checkpoint(path)
    if meta.get("preset") != "dynamics":
        raise ContractError("rollout needs a checkpoint from the dynamics preset")
    trained = cfgmod.from_dict(meta["config"])
    # architecture from the checkpoint, window and alpha from the current config
    cache_cfg = replace(trained.cache, alpha=cfg.cache.alpha, window_size=cfg.cache.window_size).build()
    dyn = trained.data.dynamics(cache_cfg.tokens_per_chunk)
    gcfg = GeneratorConfig(dyn.data_dim, cache_cfg.tokens_per_chunk, dyn.cond_dim, trained.distill.hidden)
    gen = Generator(gcfg, cache_cfg, np.random.default_rng(0))
    gen.load_state(sections["generator"])

    seed = int(cfg.rng("rollout").integers(2**62))
    stream = StreamState.start(cache_cfg, [cond], seed)

    def on_chunk(i, st):
        if switch_at is not None and i == switch_at:
            switch_conditioning(st, [c_new])

    chunks = generate(gen, stream, cfg.schedule.build(), n_chunks, on_chunk)
    out.mkdir(parents=True, exist_ok=True)
    write_sequence_csv(out / "sequence.csv", chunks)
    stream.cache.save(out / "cache.emsk")
    return chunks, stream


# -- entry point -----------------------------------------------------------------


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value or JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--alpha", type=float, help="EMA-sink decay")
    common.add_argument("--beta", type=float, help="reward temperature")
    common.add_argument("--window", type=int, help="attention window in chunks")
    common.add_argument("--steps", type=int, help="generator updates")

    p = argparse.ArgumentParser(prog="sinkdistill", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("cache-bench", parents=[common], help="cache throughput/memory/equivalence table")
    d = sub.add_parser("distill", parents=[common], help="run a distillation preset")
    d.add_argument("--preset", choices=cfgmod.PRESETS)
    d.add_argument("--reward", choices=cfgmod.REWARDS)
    a = sub.add_parser("ablate", parents=[common], help="sweep one ablation axis")
    a.add_argument("--axis", required=True, choices=("alpha", "beta", "window"))
    r = sub.add_parser("rollout", parents=[common], help="stream from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--n-chunks", type=int, default=20)
    r.add_argument("--cond", type=float, default=0.0)
    r.add_argument("--switch-at", type=int)
    r.add_argument("--c-new", type=float)
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "preset", None):
        cfg = apply_preset(cfg, args.preset)
    return cfg.with_overrides(
        seed=args.seed,
        out=args.out,
        cache__alpha=args.alpha,
        cache__window_size=args.window,
        distill__beta=args.beta,
        distill__steps=args.steps,
        distill__reward=getattr(args, "reward", None),
    )


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        if args.command == "cache-bench":
            rows = cmd_cache_bench(cfg, out)
            print(f"wrote {len(rows)} rows to {out / 'cache_bench.csv'}")
        elif args.command == "distill":
            report = cmd_distill(cfg, out)
            print(json.dumps(report, sort_keys=True))
        elif args.command == "ablate":
            rows = cmd_ablate(cfg, args.axis, out)
            for row in rows:
                print(json.dumps(row, sort_keys=True))
        else:
            if args.switch_at is not None and args.c_new is None:
                raise ConfigError("--switch-at needs --c-new", ["c_new"])
            chunks, _ = cmd_rollout(cfg, args.checkpoint, out, args.n_chunks, args.switch_at, args.c_new, args.cond)
            print(f"wrote {len(chunks)} chunks to {out / 'sequence.csv'}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (OSError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DivergenceError as e:
        print(f"diverged: {e}\n{json.dumps(e.record, sort_keys=True)}", file=sys.stderr)
        return 3
    return 0
