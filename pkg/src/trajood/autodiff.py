"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Var`` records its parents together with the vector-Jacobian product of
each edge. ``vjp`` walks the recorded graph once in reverse topological order,
so a single forward pass can be differentiated against many cotangents (used
by the Hutchinson probes) without re-running the forward computation.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class Var:
    __slots__ = ("value", "parents")
    __array_priority__ = 100.0

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return Var(a.value + b.value, ((a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))))


def neg(a) -> Var:
    a = as_var(a)
    return Var(-a.value, ((a, lambda g: -g),))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return Var(av * bv, ((a, lambda g: _unbroadcast(g * bv, av.shape)),
                         (b, lambda g: _unbroadcast(g * av, bv.shape))))


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = av / bv
    return Var(out, ((a, lambda g: _unbroadcast(g / bv, av.shape)),
                     (b, lambda g: _unbroadcast(-g * out / bv, bv.shape))))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return Var(av @ bv, ((a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)))


def spmm(S, x, ST=None) -> Var:
    """Constant sparse matrix times a differentiable dense matrix.

    ``S`` may be a scipy sparse matrix or any object carrying the matrix and
    its transpose as ``.M`` and ``.MT``.
    """
    x = as_var(x)
    if hasattr(S, "MT"):
        S, ST = S.M, S.MT
    elif ST is None:
        ST = S.T.tocsr()
    return Var(np.asarray(S @ x.value), ((x, lambda g: np.asarray(ST @ g)),))


def sum_(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Var(a.value.sum(axis=axis, keepdims=keepdims), ((a, back),))


def square(a) -> Var:
    a = as_var(a)
    av = a.value
    return Var(av * av, ((a, lambda g: 2.0 * g * av),))


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return Var(out, ((a, lambda g: g * out),))


def log(a) -> Var:
    a = as_var(a)
    av = a.value
    return Var(np.log(av), ((a, lambda g: g / av),))


def sqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.value)
    return Var(out, ((a, lambda g: 0.5 * g / out),))


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.value)
    return Var(out, ((a, lambda g: g * (1.0 - out * out)),))


def _logistic(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a) -> Var:
    a = as_var(a)
    out = _logistic(a.value)
    return Var(out, ((a, lambda g: g * out * (1.0 - out)),))


def silu(a) -> Var:
    a = as_var(a)
    av = a.value
    s = _logistic(av)
    return Var(av * s, ((a, lambda g: g * (s * (1.0 + av * (1.0 - s)))),))


def concat(xs, axis=-1) -> Var:
    xs = [as_var(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def make(i):
        return lambda g: np.split(g, splits, axis=axis)[i]

    return Var(np.concatenate([x.value for x in xs], axis=axis),
               tuple((x, make(i)) for i, x in enumerate(xs)))


def columns(a, start: int, stop: int) -> Var:
    a = as_var(a)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return out

    return Var(a.value[:, start:stop], ((a, back),))


def take_rows(a, idx: np.ndarray) -> Var:
    a = as_var(a)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return Var(a.value[idx], ((a, back),))


def scatter_rows(a, idx: np.ndarray, n_rows: int) -> Var:
    """Place rows of ``a`` at positions ``idx`` of an otherwise zero matrix."""
    a = as_var(a)

    def back(g):
        return g[idx]

    out = np.zeros((n_rows,) + a.shape[1:])
    out[idx] = a.value
    return Var(out, ((a, back),))


def logsumexp(a, axis=-1) -> Var:
    a = as_var(a)
    av = a.value
    m = av.max(axis=axis, keepdims=True)
    e = np.exp(av - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s
    return Var(out, ((a, lambda g: np.expand_dims(g, axis) * soft),))


def log_softmax(a, axis=-1) -> Var:
    a = as_var(a)
    av = a.value
    m = av.max(axis=axis, keepdims=True)
    z = av - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return Var(out, ((a, lambda g: g - soft * g.sum(axis=axis, keepdims=True)),))


def softmax(a, axis=-1) -> Var:
    a = as_var(a)
    av = a.value
    e = np.exp(av - av.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return Var(out, ((a, lambda g: out * (g - (g * out).sum(axis=axis, keepdims=True))),))


def normalize_rows(a, eps: float = 1e-12) -> Var:
    a = as_var(a)
    return a / sqrt(sum_(square(a), axis=1, keepdims=True) + eps)


def _topo_order(root: Var) -> list[Var]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


class VJP:
    """Reusable reverse pass from ``output`` to the leaves in ``wrt``."""

    def __init__(self, output: Var, wrt):
        self.output = output
        self.wrt = list(wrt)
        self._order = _topo_order(output)[::-1]
        self._targets = {id(v) for v in self.wrt}
        live = set(self._targets)
        # keep only nodes that lie on a path to a requested leaf
        for node in reversed(self._order):
            if any(id(p) in live for p, _ in node.parents):
                live.add(id(node))
        self._order = [n for n in self._order if id(n) in live]

    def __call__(self, cotangent) -> list[np.ndarray]:
        grads = {id(self.output): np.asarray(cotangent, dtype=np.float64)}
        kept = {}
        for node in self._order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in self._targets:
                kept[id(node)] = g
            for parent, fn in node.parents:
                if not parent.parents and id(parent) not in self._targets:
                    continue
                pg = fn(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [kept[id(v)] if id(v) in kept else np.zeros(v.shape) for v in self.wrt]


def vjp(output: Var, wrt, cotangent=None) -> list[np.ndarray]:
    if cotangent is None:
        cotangent = np.ones(output.shape)
    return VJP(output, wrt)(cotangent)


def grad(output: Var, wrt) -> list[np.ndarray]:
    """Gradient of a scalar output."""
    if output.value.size != 1:
        raise ValueError("grad needs a scalar output")
    return vjp(output, wrt, np.ones(output.shape))
