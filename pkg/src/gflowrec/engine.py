"""Reverse-mode gradient engine over numpy arrays.

A `Node` wraps a float64 ndarray together with the closure that propagates
an upstream gradient to its parents. Graphs are built eagerly by the op
functions below and consumed once by `backward`. Everything is double
precision; no op mutates its inputs, so forward values are bitwise
reproducible for identical inputs.

This is the pure-Python compute path. The trainer's batched step has an
equivalent fused kernel in `_speedups` (see `trainstep`), checked against
this engine in the test suite.
"""

from __future__ import annotations

import numpy as np

from .errors import TrainingError


class Node:
    __slots__ = ("value", "grad", "parents", "vjp", "requires_grad")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


def param(value):
    """A learnable leaf."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value):
    return Node(value)


def as_node(x):
    return x if isinstance(x, Node) else Node(x)


def _accum(node, g):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += g


def _unbroadcast(g, shape):
    """Reduce gradient `g` back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = as_node(a), as_node(b)

    def vjp(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return Node(a.value + b.value, (a, b), vjp)


def sub(a, b):
    a, b = as_node(a), as_node(b)

    def vjp(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    return Node(a.value - b.value, (a, b), vjp)


def mul(a, b):
    a, b = as_node(a), as_node(b)

    def vjp(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return Node(a.value * b.value, (a, b), vjp)


def neg(a):
    a = as_node(a)

    def vjp(g):
        _accum(a, -g)

    return Node(-a.value, (a,), vjp)


def matmul(a, b):
    a, b = as_node(a), as_node(b)

    def vjp(g):
        g2 = np.atleast_2d(g)
        av = np.atleast_2d(a.value)
        bv = b.value
        if a.value.ndim == 1:
            _accum(a, (g2 @ bv.T).reshape(a.value.shape))
        else:
            _accum(a, g2 @ bv.T)
        _accum(b, av.T @ g2)

    return Node(a.value @ b.value, (a, b), vjp)


def tanh(a):
    a = as_node(a)
    out = np.tanh(a.value)

    def vjp(g):
        _accum(a, g * (1.0 - out * out))

    return Node(out, (a,), vjp)


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)

    def vjp(g):
        _accum(a, g * out)

    return Node(out, (a,), vjp)


def log(a):
    a = as_node(a)

    def vjp(g):
        _accum(a, g / a.value)

    return Node(np.log(a.value), (a,), vjp)


def square(a):
    a = as_node(a)

    def vjp(g):
        _accum(a, g * 2.0 * a.value)

    return Node(a.value * a.value, (a,), vjp)


def total(a):
    """Sum of all entries, scalar result."""
    a = as_node(a)

    def vjp(g):
        _accum(a, np.full_like(a.value, float(g)))

    return Node(a.value.sum(), (a,), vjp)


def sum_axis(a, axis):
    a = as_node(a)

    def vjp(g):
        _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy())

    return Node(a.value.sum(axis=axis), (a,), vjp)


def concat_cols(parts):
    parts = [as_node(p) for p in parts]
    widths = [p.value.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def vjp(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accum(p, g[:, lo:hi])

    return Node(np.concatenate([p.value for p in parts], axis=1), tuple(parts), vjp)


def slice_cols(a, lo, hi):
    a = as_node(a)

    def vjp(g):
        full = np.zeros_like(a.value)
        full[:, lo:hi] = g
        _accum(a, full)

    return Node(a.value[:, lo:hi].copy(), (a,), vjp)


def gather_rows(table, idx):
    """table[idx] with scatter-add backward. Entries with idx < 0 read as a
    zero row and receive no gradient (used for empty prefix slots)."""
    table = as_node(table)
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    out = np.zeros((idx.shape[0], table.value.shape[1]))
    out[valid] = table.value[idx[valid]]

    def vjp(g):
        if not table.requires_grad:
            return
        acc = np.zeros_like(table.value)
        np.add.at(acc, idx[valid], g[valid])
        _accum(table, acc)

    return Node(out, (table,), vjp)


def take_per_row(mat, idx):
    """out[i] = mat[i, idx[i]]"""
    mat = as_node(mat)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(mat.value.shape[0])

    def vjp(g):
        full = np.zeros_like(mat.value)
        full[rows, idx] = g
        _accum(mat, full)

    return Node(mat.value[rows, idx], (mat,), vjp)


def log_softmax_rows(logits, limits=None):
    """Row-wise log-softmax. When `limits` is given, row i is normalized over
    its first limits[i] columns only; the remaining columns come out as -inf
    and carry no gradient."""
    logits = as_node(logits)
    x = logits.value
    n, v = x.shape
    if limits is None:
        mask = np.ones((n, v), dtype=bool)
    else:
        limits = np.asarray(limits, dtype=np.int64)
        mask = np.arange(v)[None, :] < limits[:, None]
    masked = np.where(mask, x, -np.inf)
    mx = masked.max(axis=1, keepdims=True)
    ex = np.where(mask, np.exp(masked - mx), 0.0)
    denom = ex.sum(axis=1, keepdims=True)
    out = np.where(mask, masked - mx - np.log(denom), -np.inf)
    probs = ex / denom

    def vjp(g):
        gm = np.where(mask, g, 0.0)
        _accum(logits, gm - probs * gm.sum(axis=1, keepdims=True))

    return Node(out, (logits,), vjp)


def maximum_floor(a, floor):
    """max(a, floor) elementwise; gradient passes where a >= floor."""
    a = as_node(a)
    keep = a.value >= floor

    def vjp(g):
        _accum(a, g * keep)

    return Node(np.maximum(a.value, floor), (a,), vjp)


def backward(loss):
    """Propagate d(loss)/d(leaf) into .grad of every reachable leaf.

    `loss` must be scalar. Raises TrainingError on a non-finite loss so the
    trainer can abort the step with diagnostics.
    """
    if loss.value.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if not np.isfinite(loss.value):
        raise TrainingError(f"non-finite loss: {loss.value}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    loss.grad = np.ones(())
    for node in reversed(order):
        if node.vjp is not None and node.grad is not None:
            node.vjp(node.grad)


def zero_grads(params):
    for p in params:
        p.grad = None


def collect_grads(params):
    """Gradient arrays in parameter order; zeros where a leaf was unreachable."""
    return [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]


def clip_global_norm(grads, max_norm):
    """Scale the gradient list in place so its global L2 norm is <= max_norm.
    Returns the pre-clip norm."""
    sq = sum(float((g * g).sum()) for g in grads)
    norm = np.sqrt(sq)
    if max_norm is not None and norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def sgd_update(params, grads, lr, lr_scales=None):
    for i, (p, g) in enumerate(zip(params, grads)):
        scale = 1.0 if lr_scales is None else lr_scales[i]
        p.value = np.asarray(p.value - lr * scale * g, dtype=np.float64)
