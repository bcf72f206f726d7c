"""Streaming causal attention over a sliding KV window with an EMA-fused sink.

The window is a ring buffer of ``window_size`` chunks. When it is full, the
oldest chunk is folded into a fixed-size sink with an exponential moving
average instead of being dropped, so the cache keeps a compressed trace of
the whole history at constant memory::

    S_K <- alpha * S_K + (1 - alpha) * K_evicted
    S_V <- alpha * S_V + (1 - alpha) * V_evicted

Attention reads ``[S; window]``. Keys are rotated (RoPE) when written, so
eviction never touches position information and stays O(1).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .numerics import Matrix, Var, add, concat, matmul, mul, softmax_rows, take, value_of

SNAPSHOT_MAGIC = b"EMSK"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigError(f"RoPE needs an even head_dim, got {self.head_dim}", ["head_dim"])

    def inv_freq(self) -> np.ndarray:
        return self.base ** (-np.arange(0, self.head_dim, 2, dtype=np.float64) / self.head_dim)


def _rope_tables(positions, params: RopeParams, width: int):
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    angles = pos * params.inv_freq()[None, :]
    cos = np.repeat(np.cos(angles), 2, axis=1)
    sin = np.repeat(np.sin(angles), 2, axis=1)
    reps = width // params.head_dim
    return np.tile(cos, (1, reps)), np.tile(sin, (1, reps))


def _pair_swap(width: int) -> Matrix:
    # (x @ P)[2i] = -x[2i+1], (x @ P)[2i+1] = x[2i]
    p = np.zeros((width, width))
    for i in range(0, width, 2):
        p[i + 1, i] = -1.0
        p[i, i + 1] = 1.0
    return p


def rope_rotate(x, positions, params: RopeParams):
    """Rotate each row of ``x`` by its position; wide inputs are split into heads.

    Dimension pairs ``(2i, 2i+1)`` turn by ``position * base**(-2i/head_dim)``.
    """
    xv = value_of(x)
    positions = np.asarray(positions)
    if xv.ndim != 2 or xv.shape[0] != positions.shape[0]:
        raise ShapeError(f"rope_rotate: x {xv.shape} vs {positions.shape[0]} positions")
    width = xv.shape[1]
    if width % params.head_dim:
        raise ShapeError(f"rope_rotate: width {width} not a multiple of head_dim {params.head_dim}")
    cos, sin = _rope_tables(positions, params, width)
    if isinstance(x, Var):
        return add(mul(x, cos), mul(matmul(x, _pair_swap(width)), sin))
    swapped = np.empty_like(xv)
    swapped[:, 0::2] = -xv[:, 1::2]
    swapped[:, 1::2] = xv[:, 0::2]
    return xv * cos + swapped * sin


@dataclass(frozen=True)
class EmaSinkConfig:
    alpha: float = 0.99
    window_size: int = 9
    tokens_per_chunk: int = 3
    head_dim: int = 16
    n_heads: int = 1
    sink_len: int | None = None
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.sink_len is None:
            object.__setattr__(self, "sink_len", self.tokens_per_chunk)
        bad = []
        if not 0.0 < self.alpha < 1.0:
            bad.append("alpha")
        if self.window_size < 1:
            bad.append("window_size")
        if self.tokens_per_chunk < 1:
            bad.append("tokens_per_chunk")
        if self.sink_len != self.tokens_per_chunk:
            bad.append("sink_len")
        if self.head_dim <= 0 or self.head_dim % 2:
            bad.append("head_dim")
        if self.n_heads < 1:
            bad.append("n_heads")
        if bad:
            raise ConfigError(f"invalid cache config: {', '.join(bad)}", bad)

    @property
    def width(self) -> int:
        return self.head_dim * self.n_heads

    @property
    def rope(self) -> RopeParams:
        return RopeParams(self.head_dim, self.rope_base)


@dataclass
class SinkState:
    keys: Matrix | None = None
    values: Matrix | None = None
    eviction_count: int = 0

    @property
    def initialized(self) -> bool:
        return self.keys is not None


# start-position ring plus four scalar counters
def _fixed_overhead(window_size: int) -> int:
    return 8 * window_size + 32


@dataclass
class EmaSinkCache:
    """One stream's KV cache: sink plus a ring of ``window_size`` chunk slots."""

    config: EmaSinkConfig
    sink: SinkState = field(default_factory=SinkState)

    def __post_init__(self):
        c = self.config
        self._keys = np.zeros((c.window_size, c.tokens_per_chunk, c.width))
        self._values = np.zeros_like(self._keys)
        self._starts = np.zeros(c.window_size, dtype=np.int64)
        self._head = 0  # slot of the oldest entry
        self._count = 0
        self.last_position: int | None = None

    # -- window bookkeeping ------------------------------------------------

    def __len__(self):
        return self._count

    @property
    def full(self) -> bool:
        return self._count == self.config.window_size

    def _slot(self, i: int) -> int:
        return (self._head + i) % self.config.window_size

    def entries(self):
        """``(start_position, K, V)`` for each window chunk, oldest first."""
        out = []
        for i in range(self._count):
            s = self._slot(i)
            out.append((int(self._starts[s]), self._keys[s], self._values[s]))
        return out

    @property
    def token_rows(self) -> int:
        sink = self.config.sink_len if self.sink.initialized else 0
        return sink + self._count * self.config.tokens_per_chunk

    # -- updates -------------------------------------------------------------

    def append_chunk(self, k_new, v_new, start_position: int):
        c = self.config
        k_new = np.asarray(k_new, dtype=np.float64)
        v_new = np.asarray(v_new, dtype=np.float64)
        expected = (c.tokens_per_chunk, c.width)
        if k_new.shape != expected or v_new.shape != expected:
            raise ShapeError(f"chunk K {k_new.shape} / V {v_new.shape}, expected {expected}")
        start_position = int(start_position)
        if self.last_position is not None and start_position <= self.last_position:
            raise ContractError(
                f"start_position {start_position} not after previous {self.last_position}"
            )
        positions = np.arange(start_position, start_position + c.tokens_per_chunk)
        k_rot = rope_rotate(k_new, positions, c.rope)
        if not self.sink.initialized:
            self.sink.keys = k_rot.copy()
            self.sink.values = v_new.copy()
        if self.full:
            self.evict_and_fuse()
        slot = self._slot(self._count)
        self._keys[slot] = k_rot
        self._values[slot] = v_new
        self._starts[slot] = start_position
        self._count += 1
        self.last_position = start_position

    def evict_and_fuse(self):
        """Fold the oldest window chunk into the sink. Requires a full window."""
        if not self.full:
            raise ContractError("evict_and_fuse on a window that is not full")
        a = self.config.alpha
        s = self._head
        sk, sv = self.sink.keys, self.sink.values
        sk *= a
        sk += (1.0 - a) * self._keys[s]
        sv *= a
        sv += (1.0 - a) * self._values[s]
        self._head = (self._head + 1) % self.config.window_size
        self._count -= 1
        self.sink.eviction_count += 1

    # -- reads -----------------------------------------------------------------

    def _ordered(self, store):
        idx = [self._slot(i) for i in range(self._count)]
        return store[idx].reshape(-1, self.config.width)

    def window_positions(self) -> np.ndarray:
        t = self.config.tokens_per_chunk
        starts = np.array([self._starts[self._slot(i)] for i in range(self._count)], dtype=np.int64)
        return (starts[:, None] + np.arange(t)[None, :]).reshape(-1)

    def global_kv(self) -> tuple[Matrix, Matrix]:
        """``[S_K; window K]`` and ``[S_V; window V]``, window in ascending position."""
        if not self.sink.initialized:
            raise ContractError("cache is empty")
        k = np.concatenate([self.sink.keys, self._ordered(self._keys)], axis=0)
        v = np.concatenate([self.sink.values, self._ordered(self._values)], axis=0)
        return k, v

    def attention_mask(self, q_positions, use_sink=True) -> np.ndarray:
        q = np.asarray(q_positions, dtype=np.int64).reshape(-1, 1)
        window = self.window_positions()[None, :] <= q
        sink = np.full((q.shape[0], self.config.sink_len), bool(use_sink))
        return np.concatenate([sink, window], axis=1)

    def attend(self, q, q_positions, scale: float | None = None, use_sink: bool = True):
        """Multi-head attention of queries ``q`` over the sink and the causal window.

        ``q`` is ``n_queries x (n_heads * head_dim)`` and may be a taped Var.
        Sink rows are always visible (or all hidden with ``use_sink=False``);
        window tokens after a query's position get zero weight.
        """
        c = self.config
        qv = value_of(q)
        q_positions = np.asarray(q_positions)
        if qv.ndim != 2 or qv.shape[0] != q_positions.shape[0] or qv.shape[1] != c.width:
            raise ShapeError(f"attend: Q {qv.shape} with {q_positions.shape[0]} positions")
        k, v = self.global_kv()
        if scale is None:
            scale = 1.0 / np.sqrt(c.head_dim)
        mask = self.attention_mask(q_positions, use_sink)
        q_rot = rope_rotate(q, q_positions, c.rope)
        if c.n_heads == 1:
            logits = matmul(q_rot, k.T * scale)
            return matmul(softmax_rows(logits, mask), v)
        heads = []
        for h in range(c.n_heads):
            cols = slice(h * c.head_dim, (h + 1) * c.head_dim)
            qh = take(q_rot, cols=cols) if isinstance(q_rot, Var) else q_rot[:, cols]
            logits = matmul(qh, k[:, cols].T * scale)
            heads.append(matmul(softmax_rows(logits, mask), v[:, cols]))
        return concat(heads, axis=1)

    def memory_footprint(self) -> int:
        """Bytes of live K/V storage plus the fixed bookkeeping overhead."""
        return self.token_rows * self.config.width * 2 * 8 + _fixed_overhead(self.config.window_size)

    # -- persistence -------------------------------------------------------------

    def to_bytes(self) -> bytes:
        c = self.config
        parts = [
            SNAPSHOT_MAGIC,
            struct.pack("<I", SNAPSHOT_VERSION),
            struct.pack(
                "<dIIIIId",
                c.alpha,
                c.window_size,
                c.tokens_per_chunk,
                c.sink_len,
                c.head_dim,
                c.n_heads,
                c.rope_base,
            ),
            struct.pack(
                "<BQIq",
                int(self.sink.initialized),
                self.sink.eviction_count,
                self._count,
                -1 if self.last_position is None else self.last_position,
            ),
        ]
        if self.sink.initialized:
            parts += [_f64(self.sink.keys), _f64(self.sink.values)]
        for start, k, v in self.entries():
            parts += [struct.pack("<q", start), _f64(k), _f64(v)]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> EmaSinkCache:
        if blob[:4] != SNAPSHOT_MAGIC:
            raise ValueError("not an EMA-sink snapshot")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        off = 8
        alpha, w, t, sink_len, hd, nh, base = struct.unpack_from("<dIIIIId", blob, off)
        off += struct.calcsize("<dIIIIId")
        cache = cls(EmaSinkConfig(alpha, w, t, hd, nh, sink_len, base))
        init, evictions, count, last = struct.unpack_from("<BQIq", blob, off)
        off += struct.calcsize("<BQIq")
        shape = (t, hd * nh)
        nbytes = t * hd * nh * 8
        if init:
            cache.sink.keys = _from_f64(blob, off, shape)
            cache.sink.values = _from_f64(blob, off + nbytes, shape)
            off += 2 * nbytes
        cache.sink.eviction_count = evictions
        for i in range(count):
            (start,) = struct.unpack_from("<q", blob, off)
            off += 8
            cache._keys[i] = _from_f64(blob, off, shape)
            cache._values[i] = _from_f64(blob, off + nbytes, shape)
            cache._starts[i] = start
            off += 2 * nbytes
        cache._count = count
        cache.last_position = None if last < 0 else last
        return cache

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> EmaSinkCache:
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def _f64(m: Matrix) -> bytes:
    return np.ascontiguousarray(m, dtype="<f8").tobytes()


def _from_f64(blob, offset, shape) -> Matrix:
    n = int(np.prod(shape))
    return np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)


def dense_causal_attention(q, k, v, positions, params: RopeParams, scale=None, n_heads=1):
    """Reference: full-history causal attention with RoPE on queries and keys.

    ``q``, ``k``, ``v`` hold one row per token at ``positions``; a query attends
    to every key whose position is not after its own.
    """
    positions = np.asarray(positions)
    head_dim = params.head_dim
    if scale is None:
        scale = 1.0 / np.sqrt(head_dim)
    qr = rope_rotate(q, positions, params)
    kr = rope_rotate(k, positions, params)
    out = np.zeros_like(np.asarray(v, dtype=np.float64))
    for h in range(n_heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        for i, p in enumerate(positions):
            visible = positions <= p
            logits = kr[visible, cols] @ qr[i, cols] * scale
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i, cols] = w @ v[visible, cols]
    return out
