"""Few-step flow-matching noise schedule with timestep shift.

Time runs over [0, 1000] with t = 1000 pure noise and t = 0 clean data. A
timestep t is first warped by the shift map, then ``sigma = t' / 1000`` is
the noise fraction of the straight-path interpolation
``x_t = (1 - sigma) x + sigma eps``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeError, SingularityError
from .numerics import Matrix, scale, sub, value_of

T_MAX = 1000.0


def shift_timestep(k: float, t: float) -> float:
    """Warp ``t`` toward the noisy end: ``(k u) / (1 + (k - 1) u) * 1000`` with ``u = t / 1000``."""
    if k <= 0:
        raise DomainError(f"shift factor must be positive, got {k}")
    if not 0.0 <= t <= T_MAX:
        raise DomainError(f"timestep {t} outside [0, {T_MAX:g}]")
    u = t / T_MAX
    return (k * u) / (1.0 + (k - 1.0) * u) * T_MAX


@dataclass(frozen=True)
class NoiseSchedule:
    timesteps: tuple[float, ...] = (1000.0, 750.0, 500.0, 250.0)
    shift_k: float = 5.0
    t_max: float = T_MAX

    def __post_init__(self):
        ts = tuple(float(t) for t in self.timesteps)
        object.__setattr__(self, "timesteps", ts)
        bad = []
        if not ts or any(not 0.0 < t <= self.t_max for t in ts):
            bad.append("timesteps")
        elif any(a <= b for a, b in zip(ts, ts[1:])):
            bad.append("timesteps")
        if not self.shift_k > 0:
            bad.append("shift_k")
        if self.t_max != T_MAX:
            bad.append("t_max")
        if bad:
            raise ConfigError(f"invalid noise schedule {self}", bad)

    def sigma(self, t: float) -> float:
        """Noise fraction at ``t`` after the shift."""
        return shift_timestep(self.shift_k, t) / T_MAX

    def next_timestep(self, t: float) -> float | None:
        """The timestep that follows ``t`` in the schedule, or None after the last."""
        try:
            j = self.timesteps.index(float(t))
        except ValueError:
            return None
        return self.timesteps[j + 1] if j + 1 < len(self.timesteps) else None

    def __contains__(self, t) -> bool:
        return float(t) in self.timesteps

    @property
    def dmd_timesteps(self) -> tuple[float, ...]:
        """Schedule points with both coefficients nonzero (excludes t_max)."""
        return tuple(t for t in self.timesteps if 0.0 < t < self.t_max)


def forward_diffuse(x: Matrix, t: float, eps: Matrix, schedule: NoiseSchedule) -> Matrix:
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ShapeError(f"forward_diffuse: x {x.shape} vs eps {eps.shape}")
    s = schedule.sigma(t)
    return (1.0 - s) * x + s * eps


def score_coefficients(t: float, schedule: NoiseSchedule) -> tuple[float, float]:
    """``(alpha_t, sigma_t)`` so that ``x_t = alpha_t x + sigma_t eps``."""
    s = schedule.sigma(t)
    if s == 0.0:
        raise SingularityError("score is undefined at t = 0 (sigma_t = 0)")
    return 1.0 - s, s


@dataclass(frozen=True)
class Preconditioning:
    c_skip: float = 1.0
    c_in: float = 1.0
    c_out: float = 1.0

    def c_noise(self, t: float) -> float:
        return t


def precondition_generator(v_out, eps, pc: Preconditioning = Preconditioning()):
    """``c_skip * eps - c_out * v_out``; ``v_out`` may be a taped Var."""
    if value_of(v_out).shape != value_of(eps).shape:
        raise ShapeError(
            f"precondition_generator: v {value_of(v_out).shape} vs eps {value_of(eps).shape}"
        )
    return sub(scale(eps, pc.c_skip), scale(v_out, pc.c_out))
