"""Reverse-mode automatic differentiation over numpy arrays.

Every op here accepts either plain float64 arrays or ``Var`` nodes and
returns the same kind: with plain arrays the functions are just thin numpy
wrappers, with ``Var`` inputs they record onto an implicit tape that
``backward`` replays in reverse.  Model and attention code is written once
against these wrappers and therefore runs identically with and without
gradients, which keeps the differentiated computation and the verified
forward computation the same code path.

The module also owns the multiply-add counter.  By convention only matmul
work (size of the output times the contracted dimension) and row-reduction
work (one unit per reduced entry of a logsumexp) are tallied; elementwise
and transcendental traffic is excluded.  Analytic cost models elsewhere use
the same convention, so instrumented counts can be compared against them
exactly.
"""

from __future__ import annotations

import contextlib
from typing import Iterable

import numpy as np

from . import numerics

__all__ = [
    "Var",
    "is_var",
    "val",
    "backward",
    "count_macs",
    "MacCounter",
    "tally",
    "add", "sub", "mul", "div", "neg",
    "exp", "log", "sqrt", "tanh", "power", "maximum",
    "matmul", "transpose", "swapaxes", "reshape",
    "sum_", "mean", "logsumexp", "getitem", "concatenate", "pad2d",
]


class MacCounter:
    """Accumulates multiply-add work executed under ``count_macs``."""

    __slots__ = ("total",)

    def __init__(self) -> None:
        self.total = 0


_COUNTER: MacCounter | None = None


@contextlib.contextmanager
def count_macs():
    """Collect multiply-add tallies; nested scopes roll up into the outer."""
    global _COUNTER
    previous = _COUNTER
    counter = MacCounter()
    _COUNTER = counter
    try:
        yield counter
    finally:
        _COUNTER = previous
        if previous is not None:
            previous.total += counter.total


def _tally(n: int) -> None:
    if _COUNTER is not None:
        _COUNTER.total += int(n)


def tally(n: int) -> None:
    """Credit ``n`` multiply-adds to the active counter.

    Hand-fused kernels that bypass the wrapped ops use this to keep
    instrumented counts aligned with the op-level convention.
    """
    _tally(n)


class Var:
    """A tape node: a float64 array plus how to push gradients to parents."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, _parents=(), _vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    # numpy must defer to the reflected operators below instead of trying
    # to coerce a Var into an array
    __array_ufunc__ = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def is_var(x) -> bool:
    return isinstance(x, Var)


def val(x):
    """The underlying array of a Var, or the input itself."""
    return x.value if isinstance(x, Var) else x


def _node(out_value, pairs):
    """Build a Var when any input is a Var; otherwise return the raw array.

    ``pairs`` is an iterable of (input, vjp) where vjp maps the output
    gradient to that input's gradient contribution.  Pairs whose input is
    not a Var are dropped.
    """
    live = [(p, fn) for p, fn in pairs if isinstance(p, Var)]
    if not live:
        return out_value
    parents = tuple(p for p, _ in live)
    fns = tuple(fn for _, fn in live)

    def vjp(g):
        return tuple(fn(g) for fn in fns)

    return Var(out_value, parents, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape the operand actually had."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    av, bv = val(a), val(b)
    out = av + bv
    ash = np.shape(av)
    bsh = np.shape(bv)
    return _node(out, [
        (a, lambda g: _unbroadcast(g, ash)),
        (b, lambda g: _unbroadcast(g, bsh)),
    ])


def sub(a, b):
    av, bv = val(a), val(b)
    out = av - bv
    ash = np.shape(av)
    bsh = np.shape(bv)
    return _node(out, [
        (a, lambda g: _unbroadcast(g, ash)),
        (b, lambda g: _unbroadcast(-g, bsh)),
    ])


def neg(a):
    av = val(a)
    return _node(-av, [(a, lambda g: -g)])


def mul(a, b):
    av, bv = val(a), val(b)
    out = av * bv
    ash = np.shape(av)
    bsh = np.shape(bv)
    return _node(out, [
        (a, lambda g: _unbroadcast(g * bv, ash)),
        (b, lambda g: _unbroadcast(g * av, bsh)),
    ])


def div(a, b):
    av, bv = val(a), val(b)
    out = av / bv
    ash = np.shape(av)
    bsh = np.shape(bv)
    return _node(out, [
        (a, lambda g: _unbroadcast(g / bv, ash)),
        (b, lambda g: _unbroadcast(-g * av / (bv * bv), bsh)),
    ])


def exp(a):
    out = np.exp(val(a))
    return _node(out, [(a, lambda g: g * out)])


def log(a):
    av = val(a)
    return _node(np.log(av), [(a, lambda g: g / av)])


def sqrt(a):
    out = np.sqrt(val(a))
    return _node(out, [(a, lambda g: g * (0.5 / out))])


def tanh(a):
    out = np.tanh(val(a))
    return _node(out, [(a, lambda g: g * (1.0 - out * out))])


def power(a, p):
    p = float(p)
    av = val(a)
    out = av ** p
    return _node(out, [(a, lambda g: g * (p * av ** (p - 1.0)))])


def maximum(a, b):
    av, bv = val(a), val(b)
    out = np.maximum(av, bv)
    mask = av >= bv
    ash = np.shape(av)
    bsh = np.shape(bv)
    return _node(out, [
        (a, lambda g: _unbroadcast(g * mask, ash)),
        (b, lambda g: _unbroadcast(g * (~mask), bsh)),
    ])


def matmul(a, b):
    av, bv = val(a), val(b)
    if np.ndim(av) < 2 or np.ndim(bv) < 2:
        raise ValueError("shape: matmul operands must be at least 2-D")
    out = av @ bv
    _tally(out.size * av.shape[-1])
    ash = np.shape(av)
    bsh = np.shape(bv)
    return _node(out, [
        (a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), ash)),
        (b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bsh)),
    ])


def transpose(a, axes):
    av = val(a)
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _node(av.transpose(axes), [(a, lambda g: g.transpose(inverse))])


def swapaxes(a, i, j):
    av = val(a)
    order = list(range(np.ndim(av)))
    order[i], order[j] = order[j], order[i]
    return transpose(a, order)


def reshape(a, shape):
    av = val(a)
    old = np.shape(av)
    return _node(av.reshape(shape), [(a, lambda g: g.reshape(old))])


def _expand_axes(g, axis, ndim):
    if axis is None:
        return g
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    axes = tuple(ax % ndim for ax in axes)
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return g


def sum_(a, axis=None, keepdims: bool = False):
    av = val(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    shape = np.shape(av)
    nd = np.ndim(av)

    def back(g):
        if not keepdims:
            g = _expand_axes(g, axis, nd)
        return np.broadcast_to(g, shape)

    return _node(out, [(a, back)])


def mean(a, axis=None, keepdims: bool = False):
    av = val(a)
    out = np.mean(av, axis=axis, keepdims=keepdims)
    shape = np.shape(av)
    nd = np.ndim(av)
    count = av.size / max(out.size, 1)

    def back(g):
        if not keepdims:
            g = _expand_axes(g, axis, nd)
        return np.broadcast_to(g, shape) / count

    return _node(out, [(a, back)])


def logsumexp(a, axis: int = -1, keepdims: bool = False):
    av = val(a)
    out = numerics.logsumexp(av, axis=axis, keepdims=keepdims)
    _tally(av.size)
    out_keep = out if keepdims else np.expand_dims(out, axis % av.ndim)

    def back(g):
        soft = np.exp(av - out_keep)
        if not keepdims:
            g = np.expand_dims(g, axis % av.ndim)
        return g * soft

    return _node(out, [(a, back)])


def _is_basic_index(idx) -> bool:
    entries = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(e, (slice, int)) or e is None for e in entries)


def getitem(a, idx):
    av = val(a)
    out = av[idx]
    shape = np.shape(av)
    basic = _is_basic_index(idx)

    def back(g):
        buf = np.zeros(shape, dtype=np.float64)
        if basic:
            buf[idx] += g
        else:
            np.add.at(buf, idx, g)
        return buf

    return _node(out, [(a, back)])


def concatenate(parts: Iterable, axis: int = 0):
    parts = list(parts)
    vals = [val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def make_back(i):
        lo, hi = offsets[i], offsets[i + 1]

        def back(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return back

    return _node(out, [(p, make_back(i)) for i, p in enumerate(parts)])


def pad2d(a, pad: int):
    """Zero-pad the last two axes by ``pad`` on every side."""
    av = val(a)
    width = [(0, 0)] * (av.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(av, width)

    def back(g):
        index = [slice(None)] * (g.ndim - 2)
        index += [slice(pad, g.shape[-2] - pad), slice(pad, g.shape[-1] - pad)]
        return g[tuple(index)]

    return _node(out, [(a, back)])


def backward(root: Var, seed_grad=None) -> None:
    """Propagate gradients from ``root`` to every reachable leaf Var.

    Gradient buffers are never mutated in place, only rebound, so vjp
    functions are free to return views of the incoming gradient.
    """
    if not isinstance(root, Var):
        raise TypeError("backward needs a Var root")
    order: list[Var] = []
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    root.grad = (
        np.ones_like(root.value) if seed_grad is None
        else np.asarray(seed_grad, dtype=np.float64)
    )
    for node in reversed(order):
        g = node.grad
        if g is None or node._vjp is None:
            continue
        for parent, contribution in zip(node._parents, node._vjp(g)):
            if parent.grad is None:
                parent.grad = contribution
            else:
                parent.grad = parent.grad + contribution
