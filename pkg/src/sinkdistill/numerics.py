"""Dense float64 matrices and a small tape-based reverse-mode autodiff.

A ``Matrix`` is a 2-D ``numpy.ndarray`` of float64. Every op below accepts
either plain matrices (constants) or :class:`Var` nodes living on a
:class:`Tape`. When no input is a ``Var`` the op is evaluated eagerly and
returns a plain array, so the same code path serves inference and training.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

Matrix = np.ndarray


def as_matrix(data) -> Matrix:
    """Coerce ``data`` to a 2-D float64 array (scalars become 1x1, vectors 1xN)."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    elif m.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {m.shape}")
    return m


class Var:
    """A node on a tape: a value plus the closure that propagates its gradient."""

    __slots__ = ("value", "tape", "index", "parents", "backward_fn", "name")

    def __init__(self, value, tape, parents=(), backward_fn=None, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.index = tape._register(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of the nodes created while building one computation."""

    def __init__(self):
        self.nodes: list[Var] = []

    def _register(self, var: Var) -> int:
        self.nodes.append(var)
        return len(self.nodes) - 1

    def leaf(self, value, name=None) -> Var:
        """A differentiable input."""
        return Var(as_matrix(value).copy(), self, name=name)

    def __len__(self):
        return len(self.nodes)


def value_of(x) -> Matrix:
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands belong to different tapes")
    return tape


def _unbroadcast(grad: Matrix, shape) -> Matrix:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _record(tape, value, parents, backward_fn):
    return Var(value, tape, parents=parents, backward_fn=backward_fn)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- primitive ops ----------------------------------------------------------


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: {av.shape} x {bv.shape}")
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return _record(tape, out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b):
    av, bv = value_of(a), value_of(b)
    _broadcast_shape(av, bv, "add")
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return _record(
        tape, out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape))
    )


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    _broadcast_shape(av, bv, "sub")
    out = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return _record(
        tape, out, (a, b), lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape))
    )


def mul(a, b):
    """Elementwise product with row/column broadcasting."""
    av, bv = value_of(a), value_of(b)
    _broadcast_shape(av, bv, "mul")
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return _record(
        tape,
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a, c: float):
    av = value_of(a)
    out = av * c
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: (g * c,))


def tanh(a):
    av = value_of(a)
    out = np.tanh(av)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: (g * (1.0 - out * out),))


def silu(a):
    av = value_of(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    out = av * sig
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: (g * (sig * (1.0 + av * (1.0 - sig))),))


def softmax_rows(a, mask=None):
    """Row-wise softmax, stabilized by subtracting each row's max.

    ``mask`` (boolean, same shape) marks the entries that take part; masked
    entries get weight exactly 0. Every row needs at least one unmasked entry.
    """
    av = value_of(a)
    if mask is None:
        z = av - av.max(axis=1, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != av.shape:
            raise ShapeError(f"softmax mask {mask.shape} vs logits {av.shape}")
        if not mask.any(axis=1).all():
            raise ContractError("softmax row with every entry masked")
        masked = np.where(mask, av, -np.inf)
        z = masked - masked.max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, z, 0.0)), 0.0)
    out = e / e.sum(axis=1, keepdims=True)
    tape = _tape_of(a)
    if tape is None:
        return out

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _record(tape, out, (a,), backward)


def sum_all(a):
    """Sum of every entry, as a 1x1 matrix."""
    av = value_of(a)
    out = np.array([[av.sum()]])
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: (np.full(av.shape, g[0, 0]),))


def mean_all(a):
    return scale(sum_all(a), 1.0 / value_of(a).size)


def transpose(a):
    av = value_of(a)
    out = av.T.copy()
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: (g.T,))


def concat(xs: Sequence, axis: int = 1):
    vals = [value_of(x) for x in xs]
    other = 1 - axis
    if len({v.shape[other] for v in vals}) != 1:
        raise ShapeError(f"concat along axis {axis}: {[v.shape for v in vals]}")
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def backward(g):
        if axis == 1:
            return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(vals)))
        return tuple(g[bounds[i] : bounds[i + 1], :] for i in range(len(vals)))

    return _record(tape, out, tuple(xs), backward)


def take(a, rows=slice(None), cols=slice(None)):
    """Sub-matrix selection. ``rows``/``cols`` are slices or integer index lists."""
    av = value_of(a)
    r = np.arange(av.shape[0])[rows] if isinstance(rows, slice) else np.asarray(rows)
    c = np.arange(av.shape[1])[cols] if isinstance(cols, slice) else np.asarray(cols)
    idx = np.ix_(r, c)
    out = av[idx]
    tape = _tape_of(a)
    if tape is None:
        return out

    def backward(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return (full,)

    return _record(tape, out, (a,), backward)


# -- reverse pass -----------------------------------------------------------


class Gradients(dict):
    """Maps a leaf ``Var`` to its gradient. Unreached leaves read as zero."""

    def __missing__(self, var):
        return np.zeros_like(var.value)


def backward(tape: Tape, loss: Var) -> Gradients:
    """Reverse-mode sweep from a scalar ``loss``; gradients for every leaf."""
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ContractError("loss is not a node of this tape")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: dict[int, Matrix] = {loss.index: np.ones_like(loss.value)}
    result = Gradients()
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        if node.backward_fn is None:
            result[node] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if isinstance(parent, Var):
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
    return result


# -- small networks ----------------------------------------------------------


ACTIVATIONS = {"silu": silu, "tanh": tanh}


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, zero_last=False):
    """Weights ``[(W, b), ...]`` with fan-in scaled normal init."""
    params = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_last:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
        params.append((w, np.zeros((1, n_out))))
    return params


def mlp_forward(params, x, activation="silu"):
    """Affine layers with ``activation`` between them; the last layer is linear."""
    act = ACTIVATIONS[activation]
    h = x
    for i, (w, b) in enumerate(params):
        h = add(matmul(h, w), b)
        if i < len(params) - 1:
            h = act(h)
    return h


def flatten_params(params) -> list[Matrix]:
    return [m for layer in params for m in layer]


def mlp_leaves(tape: Tape, params):
    """Put MLP weights on ``tape``; returns the same nested structure of Vars."""
    return [(tape.leaf(w), tape.leaf(b)) for w, b in params]


class Adam:
    """Adam with optional decoupled weight decay, updating arrays in place."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[int, Matrix] = {}
        self.v: dict[int, Matrix] = {}

    def step(self, params: Iterable[Matrix], grads: Iterable[Matrix]):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            m = self.m.get(i)
            if m is None:
                m = self.m[i] = np.zeros_like(p)
                self.v[i] = np.zeros_like(p)
            v = self.v[i]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}


def finite_difference(f: Callable[[Matrix], float], x: Matrix, step=1e-5) -> Matrix:
    """Central-difference gradient of a scalar function of one matrix."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        hi = f(x)
        x[idx] = orig - step
        lo = f(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * step)
    return grad
