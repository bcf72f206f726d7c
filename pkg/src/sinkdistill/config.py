"""Experiment configuration: typed sections, validation, and a diffable text format.

The text format is one ``section.key = value`` per line with JSON values;
``#`` starts a comment. A JSON document with the same nesting is accepted too.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention_cache import EmaSinkConfig
from .data import ParticleDynamics
from .distill import DistillConfig
from .errors import ConfigError
from .experiments import named_rng
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class CacheSection:
    alpha: float = 0.99
    window_size: int = 9
    tokens_per_chunk: int = 3
    head_dim: int = 16
    n_heads: int = 1

    def build(self) -> EmaSinkConfig:
        return EmaSinkConfig(self.alpha, self.window_size, self.tokens_per_chunk, self.head_dim, self.n_heads)


@dataclass(frozen=True)
class ScheduleSection:
    timesteps: tuple[float, ...] = (1000.0, 750.0, 500.0, 250.0)
    shift_k: float = 5.0

    def build(self) -> NoiseSchedule:
        return NoiseSchedule(tuple(self.timesteps), self.shift_k)


@dataclass(frozen=True)
class DistillSection:
    preset: str = "dynamics"  # gaussian | gaussian-tilt | dynamics
    reward: str = "dynamics"  # dynamics | linear | constant | none
    beta: float = 0.5
    gen_lr: float = 1e-3
    fake_lr: float = 5e-4
    fake_updates: int = 5
    steps: int = 600
    batch: int = 32
    lr_decay: float = 0.9
    eval_every: int = 60
    eval_batch: int = 128
    n_chunks: int = 4
    hidden: int = 64

    def build(self) -> DistillConfig:
        return DistillConfig(
            beta=self.beta,
            gen_lr=self.gen_lr,
            fake_lr=self.fake_lr,
            fake_updates=self.fake_updates,
            steps=self.steps,
            batch=self.batch,
            eval_every=self.eval_every,
            lr_decay=self.lr_decay,
        )


@dataclass(frozen=True)
class DataSection:
    dimension: int = 2
    rho: float = 0.8
    kappa: float = 0.1
    noise: float = 0.3
    cond_scale: float = 1.0
    # Gaussian presets
    mean: tuple[float, ...] = (1.0, -0.5)
    std: tuple[float, ...] = (0.8, 1.3)
    direction: tuple[float, ...] = (0.4, 0.2)

    def dynamics(self, tokens_per_chunk: int) -> ParticleDynamics:
        return ParticleDynamics(self.rho, self.kappa, self.noise, tokens_per_chunk, self.cond_scale)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs"
    cache: CacheSection = field(default_factory=CacheSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    distill: DistillSection = field(default_factory=DistillSection)
    data: DataSection = field(default_factory=DataSection)

    def __post_init__(self):
        validate(self)

    def rng(self, name: str) -> np.random.Generator:
        """Named sub-stream of the root seed (``cache-bench``, ``distill``, ``rollout``...)."""
        return named_rng(self.seed, name)

    def with_overrides(self, **flat) -> ExperimentConfig:
        """Copy with ``section__key=value`` or top-level ``key=value`` replaced."""
        data = to_dict(self)
        for key, value in flat.items():
            if value is None:
                continue
            section, _, name = key.partition("__")
            if name:
                data[section][name] = value
            else:
                data[section] = value
        return from_dict(data)


SECTIONS = {
    "cache": CacheSection,
    "schedule": ScheduleSection,
    "distill": DistillSection,
    "data": DataSection,
}
PRESETS = ("gaussian", "gaussian-tilt", "dynamics")
REWARDS = ("dynamics", "linear", "constant", "none")


def validate(cfg: ExperimentConfig):
    """Raise one ConfigError naming every invalid ``section.field``."""
    bad = []
    try:
        cfg.cache.build()
    except ConfigError as e:
        bad += [f"cache.{f}" for f in e.fields]
    try:
        cfg.schedule.build()
    except ConfigError as e:
        bad += [f"schedule.{f}" for f in e.fields]
    d = cfg.distill
    checks = {
        "preset": d.preset in PRESETS,
        "reward": d.reward in REWARDS,
        "beta": d.beta > 0,
        "gen_lr": d.gen_lr > 0,
        "fake_lr": d.fake_lr > 0,
        "fake_updates": d.fake_updates >= 1,
        "steps": d.steps >= 1,
        "batch": d.batch >= 2,
        "lr_decay": 0.0 <= d.lr_decay < 1.0,
        "eval_every": d.eval_every >= 0,
        "eval_batch": d.eval_batch >= 1,
        "n_chunks": d.n_chunks >= 2,
        "hidden": d.hidden >= 1,
    }
    bad += [f"distill.{k}" for k, ok in checks.items() if not ok]
    g = cfg.data
    checks = {
        "dimension": g.dimension >= 1,
        "rho": 0.0 <= g.rho < 1.0,
        "kappa": 0.0 < g.kappa < 1.0,
        "noise": g.noise > 0,
        "cond_scale": g.cond_scale >= 0,
        "mean": len(g.mean) == g.dimension,
        "std": len(g.std) == g.dimension and all(s > 0 for s in g.std),
        "direction": len(g.direction) == g.dimension,
    }
    bad += [f"data.{k}" for k, ok in checks.items() if not ok]
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        bad.append("seed")
    if bad:
        raise ConfigError(f"invalid config fields: {', '.join(bad)}", bad)


def _coerce(cls, name, value):
    """Match the declared field type so round-trips compare equal."""
    default = getattr(cls(), name)
    if isinstance(default, tuple):
        return tuple(float(v) for v in value)
    if isinstance(default, bool):
        return bool(value)
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{cls.__name__}.{name} must be an integer", [name])
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def to_dict(cfg: ExperimentConfig) -> dict:
    data = asdict(cfg)
    for section in SECTIONS:
        data[section] = {k: list(v) if isinstance(v, tuple) else v for k, v in data[section].items()}
    return data


def from_dict(data: dict) -> ExperimentConfig:
    unknown = [k for k in data if k not in SECTIONS and k not in ("seed", "out")]
    built = {}
    for section, cls in SECTIONS.items():
        values = dict(data.get(section, {}))
        known = {f.name for f in fields(cls)}
        unknown += [f"{section}.{k}" for k in values if k not in known]
        coerced = {}
        for k, v in values.items():
            if k not in known:
                continue
            try:
                coerced[k] = _coerce(cls, k, v)
            except (TypeError, ValueError):
                unknown.append(f"{section}.{k}")
        built[section] = cls(**coerced)
    if unknown:
        raise ConfigError(f"unknown or malformed config keys: {', '.join(unknown)}", unknown)
    return ExperimentConfig(int(data.get("seed", 0)), str(data.get("out", "runs")), **built)


def dumps(cfg: ExperimentConfig) -> str:
    data = to_dict(cfg)
    lines = [f"seed = {json.dumps(data['seed'])}", f"out = {json.dumps(data['out'])}"]
    for section in SECTIONS:
        lines.append("")
        lines += [f"{section}.{k} = {json.dumps(v)}" for k, v in data[section].items()]
    return "\n".join(lines) + "\n"


def loads(text: str) -> ExperimentConfig:
    stripped = text.strip()
    if stripped.startswith("{"):
        return from_dict(json.loads(stripped))
    data: dict = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected key = value", [f"line {n}"])
        key, value = key.strip(), value.strip()
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        section, dot, name = key.partition(".")
        if dot:
            data.setdefault(section, {})[name] = parsed
        else:
            data[key] = parsed
    return from_dict(data)


def save(cfg: ExperimentConfig, path):
    Path(path).write_text(dumps(cfg))


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())

