"""Dense reverse-mode differentiation on top of numpy.

Every kernel builds a new :class:`DiffValue` holding its result and a closure
that pushes the upstream gradient into its parents.  The record is rebuilt on
each forward pass (define-by-run) and consumed by :func:`backward`.

All arrays are float64.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .errors import NonFiniteError, NonScalarLossError, ShapeError

DTYPE = np.float64

# Check every kernel output for NaN/Inf.  Leaves are always checked.
CHECK_FINITE = True


class DiffValue:
    """A node in the computation record.

    Attributes
    ----------
    data : np.ndarray
        Forward value.
    grad : np.ndarray
        Accumulated d(loss)/d(data); zeros until :func:`backward` runs.
    requires_grad : bool
        Whether gradients are tracked through this node.
    """

    __slots__ = ("data", "_grad", "_parents", "_backward", "requires_grad", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        if op == "leaf" and not np.isfinite(arr).all():
            raise NonFiniteError(f"leaf value contains NaN or Inf (shape {arr.shape})")
        self.data = arr
        self._grad = None
        self._parents = _parents
        self._backward = _backward
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # never in-place: upstream kernels may hand the same array to several parents
        if self._grad is None:
            self._grad = g
        else:
            self._grad = self._grad + g

    def __repr__(self) -> str:
        return f"DiffValue(op={self.op}, shape={self.shape})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def param(data) -> DiffValue:
    """Wrap an array as a gradient-tracking leaf."""
    return DiffValue(np.array(data, dtype=DTYPE), requires_grad=True)


def constant(data) -> DiffValue:
    return DiffValue(data, requires_grad=False)


def _as_value(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else constant(x)


def _node(out: np.ndarray, parents: Sequence[DiffValue], backward: Callable[[np.ndarray], None], op: str) -> DiffValue:
    if CHECK_FINITE and not np.isfinite(out).all():
        raise NonFiniteError(f"{op}: produced NaN or Inf")
    track = any(p.requires_grad for p in parents)
    return DiffValue(out, track, _parents=tuple(parents) if track else (), _backward=backward if track else None, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: DiffValue, b: DiffValue) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def backward(loss: DiffValue) -> None:
    """Populate ``grad`` on every tracked node reachable from ``loss``."""
    if loss.data.size != 1:
        raise NonScalarLossError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[DiffValue] = []
    seen: set[int] = set()
    stack: list[tuple[DiffValue, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)


# ---------------------------------------------------------------------------
# Elementwise and linear kernels
# ---------------------------------------------------------------------------


def add(a, b) -> DiffValue:
    a, b = _as_value(a), _as_value(b)
    _broadcast_check("add", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> DiffValue:
    a, b = _as_value(a), _as_value(b)
    _broadcast_check("sub", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> DiffValue:
    a, b = _as_value(a), _as_value(b)
    _broadcast_check("mul", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw, "mul")


def scale(a: DiffValue, c: float) -> DiffValue:
    c = float(c)

    def bw(g):
        a._accumulate(g * c)

    return _node(a.data * c, (a,), bw, "scale")


def matmul(a, b) -> DiffValue:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_value(a), _as_value(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def exp(a: DiffValue) -> DiffValue:
    out = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out)

    return _node(out, (a,), bw, "exp")


def log(a: DiffValue) -> DiffValue:
    if (a.data <= 0).any():
        raise NonFiniteError("log: non-positive input")

    def bw(g):
        a._accumulate(g / a.data)

    return _node(np.log(a.data), (a,), bw, "log")


def sigmoid(a: DiffValue) -> DiffValue:
    out = expit(a.data)

    def bw(g):
        a._accumulate(g * out * (1.0 - out))

    return _node(out, (a,), bw, "sigmoid")


def log_sigmoid(a: DiffValue) -> DiffValue:
    """log(sigmoid(a)), stable for large negative inputs."""

    def bw(g):
        a._accumulate(g * expit(-a.data))

    return _node(log_expit(a.data), (a,), bw, "log_sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: DiffValue) -> DiffValue:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _node(out, (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# Shape kernels
# ---------------------------------------------------------------------------


def reshape(a: DiffValue, shape: Sequence[int]) -> DiffValue:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _node(out, (a,), bw, "reshape")


def transpose(a: DiffValue, axes: Sequence[int]) -> DiffValue:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        a._accumulate(np.transpose(g, inverse))

    return _node(np.transpose(a.data, axes), (a,), bw, "transpose")


def concat(values: Iterable[DiffValue], axis: int = 0) -> DiffValue:
    values = [_as_value(v) for v in values]
    if not values:
        raise ShapeError("concat")
    ref = values[0].shape
    ax = axis % len(ref)
    for v in values[1:]:
        if len(v.shape) != len(ref) or any(v.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, v.shape)
    splits = np.cumsum([v.shape[ax] for v in values])[:-1]

    def bw(g):
        for v, piece in zip(values, np.split(g, splits, axis=ax)):
            if v.requires_grad:
                v._accumulate(piece)

    return _node(np.concatenate([v.data for v in values], axis=ax), values, bw, "concat")


def take(a: DiffValue, indices, axis: int = 0) -> DiffValue:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(indices, dtype=np.intp)
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError("take", a.shape, idx.shape)
    ax = axis % a.data.ndim

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim))))
        a._accumulate(full)

    return _node(np.take(a.data, idx, axis=ax), (a,), bw, "take")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(a: DiffValue, axis=None, keepdims: bool = False) -> DiffValue:  # noqa: A001
    axes = _normalize_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(np.asarray(out), (a,), bw, "sum")


def mean(a: DiffValue, axis=None, keepdims: bool = False) -> DiffValue:
    axes = _normalize_axes(axis, a.data.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axes, keepdims), 1.0 / max(count, 1))


# ---------------------------------------------------------------------------
# Normalizations and losses
# ---------------------------------------------------------------------------


def softmax(a: DiffValue, axis: int = -1) -> DiffValue:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _node(out, (a,), bw, "softmax")


def log_softmax(a: DiffValue, axis: int = -1) -> DiffValue:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse

    def bw(g):
        a._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _node(out, (a,), bw, "log_softmax")


def masked_softmax(scores: DiffValue, participation) -> DiffValue:
    """Softmax over the last axis with an additive ``log(participation)`` bias.

    ``participation`` (array or DiffValue, broadcastable to ``scores``) holds
    weights in [0, 1]; zero is a bias of -inf and removes the position.  The
    result is ``p * exp(s) / sum(p * exp(s))``, and the gradient with respect
    to ``p`` is exact, including at ``p = 0``.  A row where nothing
    participates yields all zeros, i.e. an empty attention context, and passes
    no gradient.
    """
    p_val = participation if isinstance(participation, DiffValue) else constant(participation)
    p = p_val.data
    try:
        np.broadcast_shapes(scores.shape, p.shape)
    except ValueError:
        raise ShapeError("masked_softmax", scores.shape, p.shape) from None
    if not np.isfinite(scores.data).all():
        raise NonFiniteError("masked_softmax: attention scores contain NaN or Inf")
    if (p < 0).any():
        raise ValueError("masked_softmax: participation weights must be nonnegative")
    keep = p > 0
    masked = np.where(keep, scores.data, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(np.minimum(scores.data - m, 50.0))
    pe = np.where(keep, p * e, 0.0)
    total = pe.sum(axis=-1, keepdims=True)
    inv = np.where(total > 0, 1.0 / np.where(total > 0, total, 1.0), 0.0)
    out = pe * inv

    def bw(g):
        centered = g - (g * out).sum(axis=-1, keepdims=True)
        if scores.requires_grad:
            scores._accumulate(out * centered)
        if p_val.requires_grad:
            p_val._accumulate(_unbroadcast(e * inv * centered, p_val.shape))

    return _node(out, (scores, p_val), bw, "masked_softmax")


def attention_pool(q: DiffValue, k: DiffValue, v: DiffValue, participation, n_heads: int) -> DiffValue:
    """Multi-head scaled dot-product attention of one query per row.

    ``q`` is (B, E), ``k`` and ``v`` are (B, n, E) and ``participation`` is a
    (B, n) weight in [0, 1] applied exactly as in :func:`masked_softmax`.
    Returns the (B, E) context, zero for rows where nothing participates.
    """
    p_val = participation if isinstance(participation, DiffValue) else constant(participation)
    B, E = q.shape
    if k.data.ndim != 3 or k.shape[0] != B or k.shape[2] != E or v.shape != k.shape or E % n_heads:
        raise ShapeError("attention_pool", q.shape, k.shape, v.shape)
    n = k.shape[1]
    if p_val.shape != (B, n):
        raise ShapeError("attention_pool", k.shape, p_val.shape)
    if not (np.isfinite(q.data).all() and np.isfinite(k.data).all() and np.isfinite(v.data).all()):
        raise NonFiniteError("attention_pool: NaN or Inf reached attention")
    hd = E // n_heads
    c = 1.0 / math.sqrt(hd)
    q4 = q.data.reshape(B, 1, n_heads, hd)
    k4 = k.data.reshape(B, n, n_heads, hd)
    v4 = v.data.reshape(B, n, n_heads, hd)
    s = (q4 * k4).sum(axis=-1) * c  # (B, n, H)
    p = p_val.data[:, :, None]
    keep = p > 0
    m = np.where(keep, s, -np.inf).max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(np.minimum(s - m, 50.0))
    pe = np.where(keep, p * e, 0.0)
    total = pe.sum(axis=1, keepdims=True)
    inv = np.where(total > 0, 1.0 / np.where(total > 0, total, 1.0), 0.0)
    w = pe * inv
    out = (w[..., None] * v4).sum(axis=1).reshape(B, E)

    def bw(g):
        g4 = g.reshape(B, 1, n_heads, hd)
        if v.requires_grad:
            v._accumulate((w[..., None] * g4).reshape(B, n, E))
        dw = (g4 * v4).sum(axis=-1)
        centered = dw - (dw * w).sum(axis=1, keepdims=True)
        ds = (w * centered)[..., None] * c
        if q.requires_grad:
            q._accumulate((ds * k4).sum(axis=1).reshape(B, E))
        if k.requires_grad:
            k._accumulate((ds * q4).reshape(B, n, E))
        if p_val.requires_grad:
            p_val._accumulate((e * inv * centered).sum(axis=-1))

    return _node(out, (q, k, v, p_val), bw, "attention_pool")


def layer_norm(x: DiffValue, gamma: DiffValue, beta: DiffValue, eps: float = 1e-5) -> DiffValue:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        if x.requires_grad:
            dxhat = g * gamma.data
            x._accumulate(
                inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            )
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, x.shape[-1]).sum(axis=0))

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), bw, "layer_norm")


def cross_entropy(logits: DiffValue, targets, weights=None) -> DiffValue:
    """Weighted mean of -log softmax(logits)[i, targets[i]] over rows.

    With all weights zero the loss is 0 and contributes no gradient.
    """
    t = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim != 2 or t.shape != logits.shape[:1]:
        raise ShapeError("cross_entropy", logits.shape, t.shape)
    n, c = logits.shape
    if t.size and (t.min() < 0 or t.max() >= c):
        raise ValueError(f"cross_entropy: targets outside [0, {c})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=DTYPE)
    total = w.sum()
    norm = 1.0 / total if total > 0 else 0.0
    x = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=1, keepdims=True))
    logp = x - lse
    rows = np.arange(n)
    loss = -(w * logp[rows, t]).sum() * norm

    def bw(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        logits._accumulate(p * (w * norm * g)[:, None])

    return _node(np.asarray(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic generator backed by the counter-based Philox bit generator.

    Provides ``uniform``, ``standard_normal`` and ``gumbel`` among numpy's
    usual draws; identical seeds give bitwise-identical streams on every
    platform.
    """
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))
