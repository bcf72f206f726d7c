"""Distribution matching distillation with reward-weighted gradients.

The generator update follows the difference of two scores evaluated at
re-noised generator samples::

    g_i = w_i * (s_fake(x_t, t) - s_real(x_t, t)),   x_t = Psi(G(eps_i), t)

and ``g_i`` is pushed through ``dG/dtheta``. Plain DMD has ``w_i = 1``. The
rewarded variant uses ``w_i = exp(r_i / beta)`` normalized by its batch mean,
where ``r_i`` is the reward of the clean sample. Rewards enter only as
constants, so the reward function is never differentiated.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, DivergenceError, DomainError, ShapeError
from .metrics import dynamics_degree, dynamics_degree_batch
from .numerics import (
    Adam,
    Matrix,
    Tape,
    add,
    backward,
    init_mlp,
    matmul,
    mlp_forward,
    mul,
    scale,
    sub,
    sum_all,
    value_of,
)
from .schedule import NoiseSchedule, score_coefficients

# -- scores ---------------------------------------------------------------------


def score_from_denoiser(mu, x_t, t, schedule: NoiseSchedule) -> Matrix:
    """``-(x_t - alpha_t mu) / sigma_t^2``."""
    mu = np.asarray(mu, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if mu.shape != x_t.shape:
        raise ShapeError(f"denoiser output {mu.shape} vs x_t {x_t.shape}")
    alpha, sigma = score_coefficients(t, schedule)
    return -(x_t - alpha * mu) / sigma**2


class ScoreModel:
    kind = "abstract"

    def denoise(self, x_t, t, schedule, context=None) -> Matrix:
        raise NotImplementedError

    def score(self, x_t, t, schedule, context=None) -> Matrix:
        return score_from_denoiser(self.denoise(x_t, t, schedule, context), x_t, t, schedule)


def _gaussian_gain(cov, alpha, sigma):
    """``alpha Sigma (alpha^2 Sigma + sigma^2 I)^-1``, the posterior-mean gain."""
    c = alpha**2 * cov + sigma**2 * np.eye(cov.shape[0])
    return alpha * np.linalg.solve(c, cov).T


class GaussianScore(ScoreModel):
    """Exact scores of ``N(mean, cov)`` pushed through the forward process."""

    kind = "analytic_gaussian"

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(cov, dtype=np.float64)
        self.cov = np.diag(cov) if cov.ndim == 1 else cov

    def marginal(self, t, schedule):
        alpha, sigma = score_coefficients(t, schedule)
        return alpha * self.mean, alpha**2 * self.cov + sigma**2 * np.eye(len(self.mean))

    def denoise(self, x_t, t, schedule, context=None):
        alpha, sigma = score_coefficients(t, schedule)
        gain = _gaussian_gain(self.cov, alpha, sigma)
        return self.mean + (np.asarray(x_t) - alpha * self.mean) @ gain.T


class MixtureScore(ScoreModel):
    kind = "analytic_mixture"

    def __init__(self, weights, means, covs):
        self.weights = np.asarray(weights, dtype=np.float64) / np.sum(weights)
        self.components = [GaussianScore(m, c) for m, c in zip(means, covs)]

    def denoise(self, x_t, t, schedule, context=None):
        x_t = np.asarray(x_t, dtype=np.float64)
        logp, mus = [], []
        for w, comp in zip(self.weights, self.components):
            m, c = comp.marginal(t, schedule)
            diff = x_t - m
            sol = np.linalg.solve(c, diff.T).T
            _, logdet = np.linalg.slogdet(c)
            logp.append(np.log(w) - 0.5 * (np.sum(diff * sol, axis=1) + logdet))
            mus.append(comp.denoise(x_t, t, schedule))
        logp = np.stack(logp, axis=1)
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        return np.einsum("bk,kbd->bd", resp, np.stack(mus))


class ChunkTeacher(ScoreModel):
    """Exact conditional scores for the particle-dynamics chunks.

    ``context`` rows are ``[previous token (2), is_first (1), condition (1)]``.
    """

    kind = "analytic_gaussian"

    def __init__(self, dynamics):
        self.dynamics = dynamics
        self.state_map, self.cov_next, self.cov_first = dynamics.chunk_law()

    def means(self, context):
        context = np.atleast_2d(context)
        d = self.dynamics.data_dim
        prev, first, cond = context[:, :d], context[:, d : d + 1], context[:, d + 1 :]
        rest = np.zeros_like(prev)
        rest[:, 0] = cond[:, 0]
        off = self.dynamics.offset(cond)
        return off + (1.0 - first) * ((prev - rest) @ self.state_map.T), first[:, 0] > 0.5

    def denoise(self, x_t, t, schedule, context=None):
        if context is None:
            raise ContractError("chunk teacher needs a context")
        alpha, sigma = score_coefficients(t, schedule)
        m, first = self.means(context)
        x_t = np.asarray(x_t, dtype=np.float64)
        out = np.empty_like(x_t)
        for mask, cov in ((first, self.cov_first), (~first, self.cov_next)):
            if mask.any():
                gain = _gaussian_gain(cov, alpha, sigma)
                out[mask] = m[mask] + (x_t[mask] - alpha * m[mask]) @ gain.T
        return out


def _features(x_t, tau, context):
    base = x_t if context is None else np.concatenate([x_t, np.atleast_2d(context)], axis=1)
    return np.concatenate([base, base * tau, base * tau**2, tau, tau**2], axis=1)


class LearnedScore(ScoreModel):
    """Denoiser ``mu(x_t, t, context)``: a linear map plus an MLP residual.

    Both read ``[u, u tau, u tau^2, tau, tau^2]`` with ``u = [x_t, context]``
    and ``tau`` the shifted noise level, so any per-level affine denoiser is
    exactly representable.
    """

    kind = "learned"

    def __init__(self, dim, context_dim=0, hidden=64, depth=2, lr=5e-4, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        n_feat = 3 * (dim + context_dim) + 2
        self.dim = dim
        self.context_dim = context_dim
        self.linear = [(np.zeros((n_feat, dim)), np.zeros((1, dim)))]
        self.mlp = init_mlp([n_feat] + [hidden] * depth + [dim], rng, zero_last=True)
        self.optimizer = Adam(lr=lr)

    def param_list(self):
        return [m for layer in self.linear + self.mlp for m in layer]

    def param_names(self):
        names = ["linear.w", "linear.b"]
        return names + [f"mlp.{i}.{k}" for i in range(len(self.mlp)) for k in ("w", "b")]

    def _forward(self, feats, linear, mlp):
        return add(mlp_forward(linear, feats), mlp_forward(mlp, feats))

    def denoise_levels(self, x_t, sigmas, context=None, params=None):
        """Denoise with a per-row noise level ``sigmas`` (shape ``(batch, 1)``)."""
        feats = _features(np.asarray(x_t, dtype=np.float64), sigmas, context)
        linear, mlp = (self.linear, self.mlp) if params is None else params
        return self._forward(feats, linear, mlp)

    def denoise(self, x_t, t, schedule, context=None):
        x_t = np.asarray(x_t, dtype=np.float64)
        sig = np.full((x_t.shape[0], 1), schedule.sigma(t))
        return self.denoise_levels(x_t, sig, context)


# -- rewards --------------------------------------------------------------------


def dynamics_reward(sequence, scale_=1.0) -> float:
    """``tanh(dynamics_degree / scale)``: motion squashed into [0, 1)."""
    return float(np.tanh(dynamics_degree(sequence) / scale_))


@dataclass
class RewardFunction:
    kind: str = "dynamics"  # dynamics | linear | constant
    direction: tuple[float, ...] = ()
    value: float = 0.0
    scale: float = 1.0

    def __call__(self, sample) -> float:
        return float(self.batch(np.asarray(sample)[None])[0])

    def batch(self, samples) -> np.ndarray:
        samples = np.asarray(value_of(samples), dtype=np.float64)
        if self.kind == "constant":
            return np.full(samples.shape[0], float(self.value))
        if self.kind == "linear":
            return samples.reshape(samples.shape[0], -1) @ np.asarray(self.direction, dtype=np.float64)
        if self.kind == "dynamics":
            if samples.ndim != 4:
                raise ShapeError("dynamics reward needs (batch, chunks, tokens, dim) sequences")
            return np.tanh(dynamics_degree_batch(samples) / self.scale)
        raise ValueError(f"unknown reward kind {self.kind!r}")


@dataclass
class RewardWeights:
    rewards: np.ndarray
    beta: float
    weights: np.ndarray


def compute_weights(rewards, beta: float) -> RewardWeights:
    """``exp(r_i / beta)`` divided by its batch mean (log-sum-exp stabilized)."""
    if not beta > 0:
        raise DomainError(f"beta must be positive, got {beta}")
    r = np.asarray(rewards, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise DomainError("rewards must be finite")
    z = r / beta
    e = np.exp(z - z.max())
    return RewardWeights(r, beta, e / e.mean())


# -- gradients ------------------------------------------------------------------


def dmd_gradient(x0_batch, t, s_real, s_fake, schedule, rng, context=None) -> Matrix:
    """Per-sample ``s_fake - s_real`` at ``Psi(x0, t)``; both scores are constants."""
    x0 = np.asarray(value_of(x0_batch), dtype=np.float64)
    alpha, sigma = score_coefficients(t, schedule)
    x_t = alpha * x0 + sigma * rng.standard_normal(x0.shape)
    real = s_real.score(x_t, t, schedule, context)
    fake = s_fake.score(x_t, t, schedule, context)
    return -(real - fake)


def redmd_gradient(x0_batch, rewards, beta, t, s_real, s_fake, schedule, rng, context=None) -> Matrix:
    w = compute_weights(rewards, beta).weights
    return w[:, None] * dmd_gradient(x0_batch, t, s_real, s_fake, schedule, rng, context)


def generator_surrogate(x0, grad):
    """Scalar whose gradient w.r.t. the generator is ``mean_i grad_i . dx0_i``."""
    return scale(sum_all(mul(x0, grad)), 1.0 / value_of(x0).shape[0])


def _sample_levels(schedule, rng, n):
    ts = np.asarray(schedule.dmd_timesteps)
    picks = ts[rng.integers(len(ts), size=n)]
    return np.array([[schedule.sigma(t)] for t in picks])


def train_fake_score(s_fake: ScoreModel, x0_batch, schedule, rng, lr=None, context=None) -> float:
    """One Adam step on ``E_t |mu_fake(Psi(x0, t), t) - x0|^2``; returns the loss."""
    if s_fake.kind != "learned":
        raise ContractError(f"cannot train a {s_fake.kind} score")
    x0 = np.array(value_of(x0_batch), dtype=np.float64)  # detached copy
    n = x0.shape[0]
    sig = _sample_levels(schedule, rng, n)
    x_t = (1.0 - sig) * x0 + sig * rng.standard_normal(x0.shape)
    tape = Tape()
    linear = [(tape.leaf(w), tape.leaf(b)) for w, b in s_fake.linear]
    mlp = [(tape.leaf(w), tape.leaf(b)) for w, b in s_fake.mlp]
    mu = s_fake.denoise_levels(x_t, sig, context, (linear, mlp))
    err = sub(mu, x0)
    loss = scale(sum_all(mul(err, err)), 1.0 / n)
    grads = backward(tape, loss)
    leaves = [v for layer in linear + mlp for v in layer]
    if lr is not None:
        s_fake.optimizer.lr = lr
    s_fake.optimizer.step(s_fake.param_list(), [grads[v] for v in leaves])
    return float(loss.value[0, 0])


# -- generators used for distillation ---------------------------------------------


@dataclass
class Sample:
    x0: object  # Var when sampled on a tape, else Matrix
    leaves: list = field(default_factory=list)
    context: Matrix | None = None
    reward_input: np.ndarray | None = None
    sequences: np.ndarray | None = None


class AffineGenerator:
    """One-step generator ``x0 = eps @ W + b``; its output law is ``N(b, W^T W)``."""

    def __init__(self, dim, init_scale=1.0, init_mean=None):
        self.dim = dim
        self.weight = np.eye(dim) * init_scale
        self.bias = np.zeros((1, dim)) if init_mean is None else np.asarray(init_mean, float).reshape(1, dim)

    def param_list(self):
        return [self.weight, self.bias]

    def param_names(self):
        return ["weight", "bias"]

    def moments(self):
        return self.bias[0].copy(), self.weight.T @ self.weight

    def sample(self, batch, rng, tape=None) -> Sample:
        eps = rng.standard_normal((batch, self.dim))
        if tape is None:
            x0 = eps @ self.weight + self.bias
            return Sample(x0, reward_input=x0)
        w, b = tape.leaf(self.weight), tape.leaf(self.bias)
        x0 = add(matmul(eps, w), b)
        return Sample(x0, [w, b], reward_input=x0.value)


# -- training loop ----------------------------------------------------------------


@dataclass
class DistillConfig:
    beta: float = 0.5
    gen_lr: float = 1e-3
    fake_lr: float = 5e-4
    fake_updates: int = 5  # fake-score steps per generator step
    steps: int = 600
    batch: int = 64
    eval_every: int = 0
    lr_decay: float = 0.0  # final lr fraction removed by a linear ramp (0 = constant)


def _lr_at(base, cfg: DistillConfig, step):
    if not cfg.lr_decay:
        return base
    return base * (1.0 - cfg.lr_decay * step / max(cfg.steps - 1, 1))


def distill_loop(task, s_real, s_fake, reward_fn, config: DistillConfig, schedule, rng, log_path=None, evaluate=None):
    """Alternate fake-score fitting and (rewarded) generator updates.

    ``reward_fn=None`` runs vanilla DMD. ``evaluate(step)`` may return extra
    metrics; it runs before the first step and every ``eval_every`` steps.
    Returns the list of per-step records (also written as JSON lines).
    """
    gen_opt = Adam(lr=config.gen_lr)
    log = []
    sink = open(log_path, "w") if log_path else None

    def emit(rec):
        log.append(rec)
        if sink is not None:
            sink.write(json.dumps(rec, sort_keys=True) + "\n")
            sink.flush()

    try:
        if evaluate is not None:
            emit({"step": 0, "eval": evaluate(0)})
        for step in range(config.steps):
            gen_opt.lr = _lr_at(config.gen_lr, config, step)
            fake_lr = _lr_at(config.fake_lr, config, step)
            fake_losses = []
            for _ in range(config.fake_updates):
                s = task.sample(config.batch, rng)
                fake_losses.append(train_fake_score(s_fake, s.x0, schedule, rng, fake_lr, s.context))

            tape = Tape()
            s = task.sample(config.batch, rng, tape)
            t = float(rng.choice(schedule.dmd_timesteps))
            if reward_fn is None:
                rewards = None
                g = dmd_gradient(s.x0, t, s_real, s_fake, schedule, rng, s.context)
                weights = np.ones(config.batch)
            else:
                rewards = reward_fn.batch(s.reward_input)
                weights = compute_weights(rewards, config.beta).weights
                g = redmd_gradient(s.x0, rewards, config.beta, t, s_real, s_fake, schedule, rng, s.context)
            grads = backward(tape, generator_surrogate(s.x0, g))
            gen_opt.step(task.param_list(), [grads[v] for v in s.leaves])

            x0 = value_of(s.x0)
            rec = {
                "step": step + 1,
                "t": t,
                "loss_dmd": float(0.5 * np.mean(np.sum(g * g, axis=1))),
                "loss_fake": float(np.mean(fake_losses)),
                "mean_reward": None if rewards is None else float(np.mean(rewards)),
                "weight_min": float(weights.min()),
                "weight_max": float(weights.max()),
                "weight_std": float(weights.std()),
                "gen_mean": x0.mean(axis=0).tolist(),
                "gen_std": x0.std(axis=0).tolist(),
            }
            if s.sequences is not None:
                rec["dynamics"] = float(dynamics_degree_batch(s.sequences).mean())
            params = task.param_list() + s_fake.param_list()
            if not all(np.all(np.isfinite(p)) for p in params):
                rec["diverged"] = True
                emit(rec)
                raise DivergenceError(f"non-finite parameters at step {step + 1}", rec)
            if evaluate is not None and config.eval_every and (step + 1) % config.eval_every == 0:
                rec["eval"] = evaluate(step + 1)
            emit(rec)
    finally:
        if sink is not None:
            sink.close()
    return log


# -- checkpoints ------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SDCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, sections: dict[str, tuple[list[str], list[Matrix]]], meta=None):
    """Write named arrays grouped in sections (e.g. ``generator``, ``fake_score``)."""
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_blob)), meta_blob]
    parts.append(struct.pack("<I", len(sections)))
    for section, (names, arrays) in sections.items():
        sb = section.encode()
        parts += [struct.pack("<I", len(sb)), sb, struct.pack("<I", len(arrays))]
        for name, arr in zip(names, arrays):
            nb = name.encode()
            arr = np.ascontiguousarray(arr, dtype="<f8")
            parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
            parts += [struct.pack("<" + "Q" * arr.ndim, *arr.shape), arr.tobytes()]
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: ``({section: {name: array}}, meta)``."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, mlen = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(blob[off : off + mlen])
    off += mlen
    (n_sec,) = struct.unpack_from("<I", blob, off)
    off += 4
    out = {}
    for _ in range(n_sec):
        (sl,) = struct.unpack_from("<I", blob, off)
        section = blob[off + 4 : off + 4 + sl].decode()
        off += 4 + sl
        (n_arr,) = struct.unpack_from("<I", blob, off)
        off += 4
        arrays = {}
        for _ in range(n_arr):
            (nl,) = struct.unpack_from("<I", blob, off)
            name = blob[off + 4 : off + 4 + nl].decode()
            off += 4 + nl
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from("<" + "Q" * ndim, blob, off)
            off += 8 * ndim
            n = int(np.prod(shape))
            arrays[name] = np.frombuffer(blob, "<f8", n, off).reshape(shape).astype(np.float64)
            off += 8 * n
        out[section] = arrays
    return out, meta


def config_dict(cfg) -> dict:
    return asdict(cfg)
