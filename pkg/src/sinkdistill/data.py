"""Toy "video": a damped particle oscillating around a conditioning-controlled rest point.

Each token is a state ``(position, velocity)``. With ``y = s - (c, 0)``::

    y_{n+1} = F y_n + g * xi,   F = [[1 - kappa, rho], [-kappa, rho]],  g = (q, q)

i.e. ``v' = rho v - kappa (p - c) + q xi`` and ``p' = p + v'``. A chunk is
``tokens_per_chunk`` consecutive states. Everything is linear-Gaussian, so the
distribution of a chunk given the previous token (or, for the first chunk,
the stationary law) is available in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_lyapunov


@dataclass(frozen=True)
class ParticleDynamics:
    rho: float = 0.8
    kappa: float = 0.1
    noise: float = 0.3
    tokens_per_chunk: int = 3
    cond_scale: float = 1.0

    data_dim = 2
    cond_dim = 1

    @property
    def transition(self) -> np.ndarray:
        return np.array([[1.0 - self.kappa, self.rho], [-self.kappa, self.rho]])

    @property
    def noise_vec(self) -> np.ndarray:
        return np.array([self.noise, self.noise])

    @property
    def stationary_cov(self) -> np.ndarray:
        g = self.noise_vec[:, None]
        return solve_discrete_lyapunov(self.transition, g @ g.T)

    @property
    def chunk_dim(self) -> int:
        return self.tokens_per_chunk * self.data_dim

    def _propagation(self):
        """Maps (previous state, per-token noise) to the flattened chunk."""
        f, g = self.transition, self.noise_vec
        n, d = self.tokens_per_chunk, self.data_dim
        state_map = np.zeros((n * d, d))
        noise_map = np.zeros((n * d, n))
        power = np.eye(d)
        for i in range(n):
            power = f @ power
            state_map[i * d : (i + 1) * d] = power
            for j in range(i + 1):
                noise_map[i * d : (i + 1) * d, j] = np.linalg.matrix_power(f, i - j) @ g
        return state_map, noise_map

    def chunk_law(self):
        """``(state_map, cov_next, cov_first)``.

        Next chunk given previous state y: ``N(state_map @ y, cov_next)``;
        first chunk (stationary start): ``N(0, cov_first)``; both in y-coords.
        """
        a, b = self._propagation()
        cov_next = b @ b.T
        p = self.stationary_cov
        d = self.data_dim
        # first token drawn from the stationary law, the rest propagate from it
        a0 = np.vstack([np.eye(d), a[:-d]])
        first_noise = np.zeros((a.shape[0], self.tokens_per_chunk - 1))
        for i in range(1, self.tokens_per_chunk):
            for j in range(1, i + 1):
                first_noise[i * d : (i + 1) * d, j - 1] = (
                    np.linalg.matrix_power(self.transition, i - j) @ self.noise_vec
                )
        cov_first = a0 @ p @ a0.T + first_noise @ first_noise.T
        return a, cov_next, cov_first

    def offset(self, cond: np.ndarray) -> np.ndarray:
        """Rest point ``(c, 0)`` repeated over a chunk, one row per condition."""
        cond = np.atleast_2d(cond)
        off = np.zeros((cond.shape[0], self.chunk_dim))
        off[:, 0 :: self.data_dim] = cond[:, :1]
        return off

    def sample_conditions(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.cond_scale * rng.standard_normal((n, self.cond_dim))

    def sample(self, rng: np.random.Generator, n_seq: int, n_chunks: int, cond=None) -> np.ndarray:
        """``(n_seq, n_chunks, tokens_per_chunk, 2)`` sequences started at stationarity."""
        if cond is None:
            cond = self.sample_conditions(rng, n_seq)
        cond = np.atleast_2d(cond)
        f, g = self.transition, self.noise_vec
        chol = np.linalg.cholesky(self.stationary_cov)
        total = n_chunks * self.tokens_per_chunk
        states = np.zeros((n_seq, total, 2))
        y = rng.standard_normal((n_seq, 2)) @ chol.T
        states[:, 0] = y
        for n in range(1, total):
            y = y @ f.T + rng.standard_normal((n_seq, 1)) * g[None, :]
            states[:, n] = y
        states[:, :, 0] += cond[:, :1]
        return states.reshape(n_seq, n_chunks, self.tokens_per_chunk, 2)
