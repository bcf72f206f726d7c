"""Chunk-wise autoregressive few-step generation through an EMA-sink cache.

Each chunk starts from Gaussian noise at ``timesteps[0]`` and is refined by
the composition ``f_{t_1} o ... o f_{t_T}`` where one step predicts the clean
chunk with the generator and re-noises it to the next schedule level. The
finished chunk is projected to keys/values and appended to the stream's cache,
which is the only way later chunks see it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .attention_cache import EmaSinkCache, EmaSinkConfig
from .errors import ContractError, ShapeError
from .numerics import (
    Matrix,
    Tape,
    Var,
    add,
    concat,
    init_mlp,
    matmul,
    mlp_forward,
    scale,
    take,
    value_of,
)
from .schedule import NoiseSchedule, Preconditioning, forward_diffuse, precondition_generator


@dataclass
class FrameChunk:
    tokens: Matrix  # tokens_per_chunk x data_dim
    start_position: int


@dataclass(frozen=True)
class GeneratorConfig:
    data_dim: int = 2
    tokens_per_chunk: int = 3
    cond_dim: int = 1
    hidden: int = 64
    depth: int = 2


def chunk_rng(seed: int, chunk_index: int) -> np.random.Generator:
    """Counter-based noise source: the chunk index is the low half of a Philox key."""
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) | int(chunk_index)))


class Generator:
    """Few-step denoiser ``G(x_t, t, c, cache)``.

    A chunk is flattened into one row. The velocity net sees that row, an
    attention readout of the cache for every token, the shifted noise level
    and the conditioning vector. Queries are learned; key/value projections
    are fixed because cached entries are never re-projected.
    """

    def __init__(self, config: GeneratorConfig, cache_config: EmaSinkConfig, rng: np.random.Generator):
        if config.tokens_per_chunk != cache_config.tokens_per_chunk:
            raise ShapeError("generator and cache disagree on tokens_per_chunk")
        self.config = config
        self.cache_config = cache_config
        d, width = config.data_dim, cache_config.width
        t = config.tokens_per_chunk
        in_dim = t * d + t * width + 1 + config.cond_dim
        sizes = [in_dim] + [config.hidden] * config.depth + [t * d]
        self.mlp = init_mlp(sizes, rng, zero_last=True)
        self.w_q = rng.standard_normal((d, width)) / np.sqrt(d)
        self.w_k = rng.standard_normal((d, width)) / np.sqrt(d)
        self.w_v = rng.standard_normal((d, width)) / np.sqrt(d)
        self.preconditioning = Preconditioning()
        self.n_calls = 0
        self.n_renoise = 0

    # parameters in a fixed order, shared by leaves(), optimizers and checkpoints
    def param_list(self) -> list[Matrix]:
        return [m for layer in self.mlp for m in layer] + [self.w_q]

    def param_names(self) -> list[str]:
        names = [f"mlp.{i}.{k}" for i in range(len(self.mlp)) for k in ("w", "b")]
        return names + ["w_q"]

    def state(self) -> tuple[list[str], list[Matrix]]:
        """Trainable parameters plus the fixed projections, for checkpoints."""
        return self.param_names() + ["w_k", "w_v"], self.param_list() + [self.w_k, self.w_v]

    def load_state(self, arrays: dict[str, Matrix]):
        names, current = self.state()
        missing = [n for n in names if n not in arrays]
        if missing:
            raise ContractError(f"checkpoint lacks generator arrays {missing}")
        for name, dst in zip(names, current):
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != dst.shape:
                raise ShapeError(f"{name}: checkpoint {src.shape} vs model {dst.shape}")
            dst[...] = src

    def leaves(self, tape: Tape):
        """(mlp, w_q) with every trainable array replaced by a Var on ``tape``."""
        mlp = [(tape.leaf(w), tape.leaf(b)) for w, b in self.mlp]
        return mlp, tape.leaf(self.w_q)

    def kv(self, tokens: Matrix) -> tuple[Matrix, Matrix]:
        return tokens @ self.w_k, tokens @ self.w_v

    def readout(self, cache: EmaSinkCache, tokens: Matrix, positions, w_q=None):
        """Cache attention for each noisy token, flattened to one row."""
        t, width = self.config.tokens_per_chunk, self.cache_config.width
        if not cache.sink.initialized:
            return np.zeros((1, t * width))
        q = matmul(tokens, self.w_q if w_q is None else w_q)
        r = cache.attend(q, positions)
        if isinstance(r, Var):
            return concat([take(r, rows=[i]) for i in range(t)], axis=1)
        return r.reshape(1, -1)

    def denoise(self, x_t: Matrix, t: float, cond: Matrix, readout, schedule: NoiseSchedule, params=None):
        """Clean-chunk estimate ``x_t - sigma * v``, ``v = x_t + net(...)``; rows are samples."""
        mlp = self.mlp if params is None else params
        sigma = schedule.sigma(t)
        tau = np.full((x_t.shape[0], 1), self.preconditioning.c_noise(sigma))
        x_in = self.preconditioning.c_in * x_t
        h = concat([x_in, readout, tau, cond], axis=1)
        v = add(mlp_forward(mlp, h), x_t)
        self.n_calls += 1
        return precondition_generator(scale(v, sigma), x_t, self.preconditioning)


@dataclass
class StreamState:
    cache: EmaSinkCache
    conditioning: Matrix
    seed: int
    chunk_index: int = 0
    position: int = 0

    @classmethod
    def start(cls, cache_config: EmaSinkConfig, conditioning, seed: int) -> StreamState:
        c = np.atleast_2d(np.asarray(conditioning, dtype=np.float64))
        return cls(EmaSinkCache(cache_config), c, int(seed))


def switch_conditioning(stream: StreamState, c_new):
    """Swap the conditioning vector; the self-attention cache is left alone."""
    c_new = np.atleast_2d(np.asarray(c_new, dtype=np.float64))
    if c_new.shape != stream.conditioning.shape:
        raise ShapeError(f"conditioning {c_new.shape} vs {stream.conditioning.shape}")
    stream.conditioning = c_new


def _positions(stream: StreamState, t: int) -> np.ndarray:
    return np.arange(stream.position, stream.position + t)


def _denoise_rows(gen, streams, x_t, t, schedule, params=None):
    """One generator call on a batch of streams, one row per stream."""
    tpc, d = gen.config.tokens_per_chunk, gen.config.data_dim
    mlp, w_q = (None, None) if params is None else params
    reads = [
        gen.readout(s.cache, x_t[i].reshape(tpc, d), _positions(s, tpc), w_q)
        for i, s in enumerate(streams)
    ]
    readout = concat(reads, axis=0) if len(reads) > 1 else reads[0]
    cond = np.concatenate([s.conditioning for s in streams], axis=0)
    return gen.denoise(x_t, t, cond, readout, schedule, mlp)


def denoise_step(gen: Generator, x_t: FrameChunk, t: float, stream: StreamState, schedule: NoiseSchedule, rng=None):
    """``Psi(G(x_t, t, context), t_next)``, or the clean estimate on the last step."""
    if t not in schedule:
        raise ContractError(f"timestep {t} is not in the schedule {schedule.timesteps}")
    x = np.asarray(x_t.tokens, dtype=np.float64).reshape(1, -1)
    x0 = _denoise_rows(gen, [stream], x, t, schedule)
    t_next = schedule.next_timestep(t)
    tokens = x0
    if t_next is not None:
        if rng is None:
            rng = chunk_rng(stream.seed, stream.chunk_index)
        tokens = forward_diffuse(x0, t_next, rng.standard_normal(x0.shape), schedule)
        gen.n_renoise += 1
    return FrameChunk(tokens.reshape(x_t.tokens.shape), x_t.start_position)


def _commit(gen: Generator, stream: StreamState, tokens: Matrix):
    k, v = gen.kv(tokens)
    stream.cache.append_chunk(k, v, stream.position)
    stream.position += gen.config.tokens_per_chunk
    stream.chunk_index += 1


def rollout_chunk(gen: Generator, stream: StreamState, schedule: NoiseSchedule, transform=None) -> FrameChunk:
    """Generate the next chunk from fresh noise and append it to the cache.

    ``transform`` optionally edits the finished tokens before they are cached.
    """
    tpc, d = gen.config.tokens_per_chunk, gen.config.data_dim
    rng = chunk_rng(stream.seed, stream.chunk_index)
    chunk = FrameChunk(rng.standard_normal((tpc, d)), stream.position)
    for t in schedule.timesteps:
        chunk = denoise_step(gen, chunk, t, stream, schedule, rng)
    if transform is not None:
        chunk = FrameChunk(np.asarray(transform(chunk.tokens), dtype=np.float64), chunk.start_position)
    _commit(gen, stream, chunk.tokens)
    return chunk


def generate(gen: Generator, stream: StreamState, schedule: NoiseSchedule, n_chunks: int, on_chunk=None):
    """Stream ``n_chunks`` chunks; ``on_chunk(index, stream)`` runs before each one."""
    if n_chunks < 1:
        raise ContractError("n_chunks must be at least 1")
    out = []
    for _ in range(n_chunks):
        if on_chunk is not None:
            on_chunk(stream.chunk_index, stream)
        out.append(rollout_chunk(gen, stream, schedule))
    return out


@dataclass
class BatchRollout:
    sequences: np.ndarray  # batch x chunks x tokens x dim
    x0: Var | Matrix | None = None  # gradient-carrying chunk, one row per stream
    prev_tokens: Matrix | None = None  # last token before that chunk (zeros for chunk 0)
    chunk: int = 0
    conditions: Matrix | None = None
    leaves: list = field(default_factory=list)


def rollout_batch(
    gen: Generator,
    streams: list[StreamState],
    schedule: NoiseSchedule,
    n_chunks: int,
    tape: Tape | None = None,
    record_chunk: int | None = None,
    exit_step: int | None = None,
) -> BatchRollout:
    """Advance every stream by ``n_chunks`` chunks in lockstep.

    Chunk ``record_chunk`` stops at denoising step ``exit_step`` (default: the
    last) and that prediction becomes both the chunk and ``result.x0``. With a
    ``tape`` the prediction is recorded with gradients w.r.t. the generator
    parameters; earlier steps and all other chunks stay constants.
    """
    tpc, d = gen.config.tokens_per_chunk, gen.config.data_dim
    b = len(streams)
    seqs = np.zeros((b, n_chunks, tpc, d))
    result = BatchRollout(seqs, conditions=np.concatenate([s.conditioning for s in streams]))
    params = None
    if tape is not None:
        params = gen.leaves(tape)
        result.leaves = [v for layer in params[0] for v in layer] + [params[1]]
    steps = list(schedule.timesteps)
    for ci in range(n_chunks):
        rngs = [chunk_rng(s.seed, s.chunk_index) for s in streams]
        x = np.concatenate([r.standard_normal((1, tpc * d)) for r in rngs], axis=0)
        recorded = ci == record_chunk
        taped = recorded and tape is not None
        last = len(steps) - 1 if exit_step is None or not recorded else exit_step
        if recorded:
            result.chunk = ci
            result.prev_tokens = (
                seqs[:, ci - 1, -1, :].copy() if ci > 0 else np.zeros((b, d))
            )
        for j, t in enumerate(steps[: last + 1]):
            if taped and j == last:
                x0 = _denoise_rows(gen, streams, x, t, schedule, params)
                result.x0 = x0
                x0 = value_of(x0)
            else:
                x0 = _denoise_rows(gen, streams, x, t, schedule)
                if recorded and j == last:
                    result.x0 = x0
            if j < last:
                t_next = steps[j + 1]
                noise = np.concatenate([r.standard_normal((1, tpc * d)) for r in rngs], axis=0)
                x = forward_diffuse(x0, t_next, noise, schedule)
                gen.n_renoise += 1
        for i, s in enumerate(streams):
            tokens = x0[i].reshape(tpc, d)
            seqs[i, ci] = tokens
            _commit(gen, s, tokens)
    return result


def write_sequence_csv(path, chunks, chunk_offset=0):
    """One row per token: ``chunk_index, token_index, d0, d1, ...``."""
    chunks = list(chunks)
    dim = np.asarray(chunks[0].tokens).shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["chunk_index", "token_index"] + [f"d{i}" for i in range(dim)])
        for ci, c in enumerate(chunks):
            for ti, row in enumerate(np.asarray(c.tokens)):
                w.writerow([ci + chunk_offset, ti] + [repr(float(v)) for v in row])
