"""Distillation tasks and presets shared by the CLI, scripts and tests."""

from __future__ import annotations

import numpy as np

from .attention_cache import EmaSinkConfig
from .data import ParticleDynamics
from .distill import (
    AffineGenerator,
    ChunkTeacher,
    DistillConfig,
    GaussianScore,
    LearnedScore,
    Sample,
    distill_loop,
)
from .metrics import dynamics_degree_batch
from .rollout import Generator, GeneratorConfig, StreamState, rollout_batch
from .schedule import NoiseSchedule


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent sub-stream of the root seed, keyed by a stable name."""
    key = [int.from_bytes(name.encode(), "little") % (2**63)]
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + key))


class SequenceTask:
    """Self-forcing rollouts of the chunk generator for distillation.

    Every sample is a fresh batch of streams with random conditions. One
    chunk per batch is chosen at random and exits the denoising chain at a
    random step; that prediction is what the scores and gradients act on.
    """

    def __init__(self, gen: Generator, dynamics: ParticleDynamics, schedule: NoiseSchedule, n_chunks=4):
        self.gen = gen
        self.dynamics = dynamics
        self.schedule = schedule
        self.n_chunks = n_chunks

    def param_list(self):
        return self.gen.param_list()

    def param_names(self):
        return self.gen.param_names()

    def streams(self, rng, batch, conditions=None):
        if conditions is None:
            conditions = self.dynamics.sample_conditions(rng, batch)
        seeds = rng.integers(0, 2**62, size=batch)
        return [StreamState.start(self.gen.cache_config, conditions[i], seeds[i]) for i in range(batch)]

    def sample(self, batch, rng, tape=None) -> Sample:
        streams = self.streams(rng, batch)
        chunk = int(rng.integers(self.n_chunks))
        exit_step = int(rng.integers(len(self.schedule.timesteps)))
        r = rollout_batch(self.gen, streams, self.schedule, self.n_chunks, tape, chunk, exit_step)
        first = np.full((batch, 1), 1.0 if chunk == 0 else 0.0)
        context = np.concatenate([r.prev_tokens, first, r.conditions], axis=1)
        return Sample(r.x0, r.leaves, context, r.sequences, r.sequences)

    def rollout(self, seed, batch, n_chunks=None):
        """Full-chain sequences for evaluation, ``(batch, chunks, tokens, dim)``."""
        rng = np.random.default_rng(seed)
        streams = self.streams(rng, batch)
        return rollout_batch(self.gen, streams, self.schedule, n_chunks or self.n_chunks).sequences

    def evaluator(self, seed=12345, batch=128, n_chunks=None):
        def evaluate(step):
            seqs = self.rollout(seed, batch, n_chunks)
            return {"dynamics_degree": float(dynamics_degree_batch(seqs).mean())}

        return evaluate


def gaussian_problem(mean, std, seed=0, fake_lr=5e-4):
    """Affine generator vs an analytic diagonal Gaussian teacher."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), mean.shape)
    teacher = GaussianScore(mean, std**2)
    fake = LearnedScore(len(mean), lr=fake_lr, rng=named_rng(seed, "fake-init"))
    return AffineGenerator(len(mean)), teacher, fake


def sequence_problem(cache_config: EmaSinkConfig, dynamics: ParticleDynamics, schedule, seed=0, n_chunks=4, hidden=64, fake_lr=5e-4):
    gcfg = GeneratorConfig(
        data_dim=dynamics.data_dim,
        tokens_per_chunk=cache_config.tokens_per_chunk,
        cond_dim=dynamics.cond_dim,
        hidden=hidden,
    )
    gen = Generator(gcfg, cache_config, named_rng(seed, "generator-init"))
    task = SequenceTask(gen, dynamics, schedule, n_chunks)
    ctx_dim = dynamics.data_dim + 1 + dynamics.cond_dim
    fake = LearnedScore(dynamics.chunk_dim, ctx_dim, hidden=hidden, lr=fake_lr, rng=named_rng(seed, "fake-init"))
    return task, ChunkTeacher(dynamics), fake


def run_gaussian(mean, std, reward=None, config=None, seed=0, schedule=None, log_path=None):
    """Distill a Gaussian teacher; returns ``(generator, log)``."""
    schedule = schedule or NoiseSchedule()
    config = config or DistillConfig(steps=2000, gen_lr=3e-3, lr_decay=0.95)
    gen, teacher, fake = gaussian_problem(mean, std, seed, config.fake_lr)
    log = distill_loop(gen, teacher, fake, reward, config, schedule, named_rng(seed, "distill"), log_path)
    return gen, log


def run_sequence(cache_config, dynamics, reward=None, config=None, seed=0, schedule=None, n_chunks=4, log_path=None, eval_batch=128):
    """Distill the chunk generator on particle dynamics; returns ``(task, log)``."""
    schedule = schedule or NoiseSchedule()
    config = config or DistillConfig()
    task, teacher, fake = sequence_problem(cache_config, dynamics, schedule, seed, n_chunks, fake_lr=config.fake_lr)
    evaluate = task.evaluator(batch=eval_batch)
    log = distill_loop(task, teacher, fake, reward, config, schedule, named_rng(seed, "distill"), log_path, evaluate)
    return task, log


def eval_series(log):
    """``[(step, dynamics_degree), ...]`` from the evaluation records of a log."""
    return [(rec["step"], rec["eval"]["dynamics_degree"]) for rec in log if "eval" in rec]


def clip_quality(sequences, teacher: ChunkTeacher, conditions, chunks_per_clip):
    """Per-clip mean teacher log-likelihood of each chunk given its predecessor."""
    seqs = np.asarray(sequences)
    b, n, t, d = seqs.shape
    flat = seqs.reshape(b, n, t * d)
    covs = {True: teacher.cov_first, False: teacher.cov_next}
    # regularize the rank-deficient chunk laws so the density is defined
    inv = {k: np.linalg.inv(c + 1e-2 * np.eye(len(c))) for k, c in covs.items()}
    logdet = {k: np.linalg.slogdet(c + 1e-2 * np.eye(len(c)))[1] for k, c in covs.items()}
    scores = np.zeros((b, n))
    for i in range(n):
        prev = seqs[:, i - 1, -1, :] if i else np.zeros((b, d))
        first = np.full((b, 1), 1.0 if i == 0 else 0.0)
        ctx = np.concatenate([prev, first, conditions], axis=1)
        m, _ = teacher.means(ctx)
        diff = flat[:, i] - m
        k = i == 0
        scores[:, i] = -0.5 * (np.sum(diff @ inv[k] * diff, axis=1) + logdet[k])
    clips = n // chunks_per_clip
    return scores[:, : clips * chunks_per_clip].reshape(b, clips, chunks_per_clip).mean(axis=2)


def long_rollout(task: SequenceTask, seed, n_streams, n_chunks):
    """``n_chunks`` per stream through the cache, far past the training horizon."""
    rng = np.random.default_rng(seed)
    streams = task.streams(rng, n_streams)
    r = rollout_batch(task.gen, streams, task.schedule, n_chunks)
    return r.sequences, r.conditions
