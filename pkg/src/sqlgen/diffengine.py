"""Reverse-mode differentiation over a small set of array primitives.

Every primitive accepts plain ``numpy`` arrays or :class:`Var` nodes.  When no
argument is a :class:`Var` the primitive just returns the numpy result, so the
same model code serves both gradient evaluation and fast inference.

Each call to :func:`backward` builds its own graph; nothing is shared between
invocations.
"""
from __future__ import annotations

from typing import Callable, Dict, Mapping

import numpy as np

ParamVector = Dict[str, np.ndarray]
GradVector = Dict[str, np.ndarray]


class NonFiniteError(FloatingPointError):
    """Raised by the first primitive whose output is not finite."""

    def __init__(self, primitive: str):
        super().__init__(f"non-finite value produced by primitive {primitive!r}")
        self.primitive = primitive


class Var:
    __slots__ = ("value", "parents", "op")

    def __init__(self, value, parents=(), op="leaf"):
        self.value = value
        self.parents = parents
        self.op = op

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.shape})"


def value(x):
    return x.value if isinstance(x, Var) else x


def _node(out, op, parents):
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(op)
    parents = tuple((p, f) for p, f in parents if isinstance(p, Var))
    if not parents:
        return out
    return Var(out, parents, op)


def _unbroadcast(g, shape):
    while np.ndim(g) > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- primitives ---------------------------------------------------------------


def add(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _node(av + bv, "add", [(a, lambda g: _unbroadcast(g, sa)),
                                  (b, lambda g: _unbroadcast(g, sb))])


def sub(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _node(av - bv, "sub", [(a, lambda g: _unbroadcast(g, sa)),
                                  (b, lambda g: -_unbroadcast(g, sb))])


def mul(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _node(av * bv, "mul", [(a, lambda g: _unbroadcast(g * bv, sa)),
                                  (b, lambda g: _unbroadcast(g * av, sb))])


def matmul(a, b):
    """Affine building block; ``a`` may be 1-D or 2-D, ``b`` is 2-D."""
    av, bv = value(a), value(b)
    out = av @ bv

    def grad_a(g):
        return g @ bv.T

    def grad_b(g):
        if np.ndim(av) == 1:
            return np.outer(av, g)
        return av.T @ g

    return _node(out, "matmul", [(a, grad_a), (b, grad_b)])


def tanh(x):
    out = np.tanh(value(x))
    return _node(out, "tanh", [(x, lambda g: g * (1.0 - out * out))])


def exp(x):
    out = np.exp(value(x))
    return _node(out, "exp", [(x, lambda g: g * out)])


def log(x):
    xv = value(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xv)
    return _node(out, "log", [(x, lambda g: g / xv)])


def square(x):
    xv = value(x)
    return _node(xv * xv, "square", [(x, lambda g: 2.0 * g * xv)])


def logsumexp(x):
    """Log-sum-exp over the last axis, max-subtracted."""
    xv = value(x)
    m = np.max(xv, axis=-1, keepdims=True)
    e = np.exp(xv - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    soft = e / s
    return _node(out, "logsumexp", [(x, lambda g: g[..., None] * soft)])


def softmax(x):
    xv = value(x)
    e = np.exp(xv - np.max(xv, axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return out * (g - (g * out).sum(axis=-1, keepdims=True))

    return _node(out, "softmax", [(x, grad)])


def log_softmax(x):
    xv = value(x)
    m = np.max(xv, axis=-1, keepdims=True)
    shifted = xv - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def grad(g):
        return g - soft * g.sum(axis=-1, keepdims=True)

    return _node(out, "log_softmax", [(x, grad)])


def sum_(x, axis=None):
    xv = value(x)
    shape = np.shape(xv)
    out = np.sum(xv, axis=axis)

    def grad(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return _node(out, "sum", [(x, grad)])


def gather(x, idx):
    """``out[..., ] = x[..., idx[...]]`` along the last axis."""
    xv = value(x)
    idx = np.asarray(idx)
    out = np.take_along_axis(xv, idx[..., None], axis=-1)[..., 0]

    def grad(g):
        full = np.zeros_like(xv)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return full

    return _node(out, "gather", [(x, grad)])


def rows(table, ids):
    """Embedding lookup: ``table[ids]`` for an integer array ``ids``."""
    tv = value(table)
    ids = np.asarray(ids)
    out = tv[ids]

    def grad(g):
        full = np.zeros_like(tv)
        np.add.at(full, ids, g)
        return full

    return _node(out, "rows", [(table, grad)])


def getitem(x, key):
    """Basic (non-fancy) indexing only."""
    xv = value(x)
    out = xv[key]

    def grad(g):
        full = np.zeros_like(xv)
        full[key] = g
        return full

    return _node(out, "getitem", [(x, grad)])


def reshape(x, shape):
    xv = value(x)
    old = np.shape(xv)
    return _node(np.reshape(xv, shape), "reshape", [(x, lambda g: np.reshape(g, old))])


def stack(xs, axis=0):
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)

    def make(i):
        return lambda g: np.take(g, i, axis=axis)

    return _node(out, "stack", [(x, make(i)) for i, x in enumerate(xs)])


def concat(xs, axis=-1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [np.shape(v)[axis] for v in vals])

    def make(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        return lambda g: g[tuple(sl)]

    return _node(out, "concat", [(x, make(i)) for i, x in enumerate(xs)])


def masked_sum(x, mask):
    """Sum of ``x * mask`` reduced strictly left to right in row-major order.

    The sequential reduction makes trailing zero padding leave the result
    bit-identical.
    """
    xv = value(x)
    mask = np.asarray(mask, dtype=float)
    flat = (xv * mask).ravel()
    out = np.cumsum(flat)[-1] if flat.size else 0.0
    return _node(np.float64(out), "masked_sum", [(x, lambda g: g * mask)])


def masked_mean(x, mask):
    mask = np.asarray(mask, dtype=float)
    count = mask.sum()
    if count == 0:
        raise ValueError("masked_mean over an empty mask")
    return mul(masked_sum(x, mask), 1.0 / count)


# -- drivers ------------------------------------------------------------------


def _toposort(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss_fn: Callable[[Mapping[str, Var]], object], params: Mapping[str, np.ndarray]):
    """Evaluate ``loss_fn`` on ``params`` and return ``(loss, grads)``."""
    leaves = {k: Var(np.asarray(v, dtype=float)) for k, v in params.items()}
    out = loss_fn(leaves)
    grads = {k: np.zeros(np.shape(v), dtype=float) for k, v in params.items()}
    if not isinstance(out, Var):
        return float(out), grads
    if np.ndim(out.value) != 0:
        raise ValueError("loss_fn must return a scalar")

    adj = {id(out): np.ones(())}
    for node in reversed(_toposort(out)):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            adj[key] = adj[key] + contrib if key in adj else contrib
        if node.op == "leaf":
            adj[id(node)] = g
    for name, leaf in leaves.items():
        g = adj.get(id(leaf))
        if g is not None:
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("backward")
            grads[name] = np.asarray(g, dtype=float).reshape(np.shape(leaf.value))
    return float(out.value), grads


def evaluate(loss_fn, params) -> float:
    return float(value(loss_fn({k: np.asarray(v, dtype=float) for k, v in params.items()})))


def finite_diff_check(loss_fn, params, n_probes: int = 50, step: float = 1e-5, rng=None) -> float:
    """Max of |analytic - central difference| / max(1, |numeric|) over probed coordinates."""
    if n_probes < 1 or step <= 0:
        raise ValueError("need n_probes >= 1 and step > 0")
    rng = np.random.default_rng(0) if rng is None else rng
    _, grads = backward(loss_fn, params)
    names = list(params)
    sizes = np.array([np.size(params[n]) for n in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_probes, total), replace=False)
    offsets = np.cumsum(np.concatenate([[0], sizes]))
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, j = names[k], int(flat - offsets[k])
        probe = {n: np.array(v, dtype=float, copy=True) for n, v in params.items()}
        base = probe[name].reshape(-1)
        orig = base[j]
        base[j] = orig + step
        f_plus = evaluate(loss_fn, probe)
        base[j] = orig - step
        f_minus = evaluate(loss_fn, probe)
        numeric = (f_plus - f_minus) / (2 * step)
        analytic = grads[name].reshape(-1)[j]
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst
