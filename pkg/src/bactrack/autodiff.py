"""Minimal reverse-mode tape over the reference kernels.

Model code (attention, encoder/decoder) is written against the lifted ops
in this module.  With plain numpy inputs they fall straight through to the
kernels in :mod:`bactrack.numerics`; when any argument is a :class:`Node`
the same forward value is computed and a pullback is recorded, so taped
and untaped forwards are bit-identical.  Used by the gradient checks only;
the tracking pipeline always runs the plain path.
"""

from typing import Optional

import numpy as np

from . import numerics as nx


class Node:
    """One tape entry: a value plus pullbacks into its parents."""

    __slots__ = ("value", "grad", "parents")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value)
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)  # (Node, pullback) pairs

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype


def param(x) -> Node:
    """Wrap an array as a differentiable leaf."""
    return Node(np.asarray(x))


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _is_node(*args):
    return any(isinstance(a, Node) for a in args)


def _edges(pairs):
    # keep only pullbacks into actual Nodes; constants need no gradient
    return [(a, fn) for a, fn in pairs if isinstance(a, Node)]


def backward(out: Node, cotangent) -> None:
    """Accumulate cotangents into .grad over the whole tape below out."""
    order = []
    seen = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            stack.append((parent, False))
    out.grad = np.asarray(cotangent, dtype=out.value.dtype)
    for node in reversed(order):
        if node.grad is None:
            continue
        g = node.grad
        for parent, pullback in node.parents:
            contrib = pullback(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib


# ---------------------------------------------------------------------------
# Lifted ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    if not _is_node(a, b):
        return nx.matmul(a, b)
    av, bv = value_of(a), value_of(b)
    out = nx.matmul(av, bv)
    return Node(out, _edges([
        (a, lambda g: nx.matmul(g, np.ascontiguousarray(bv.T))),
        (b, lambda g: nx.matmul(np.ascontiguousarray(av.T), g)),
    ]))


def add(a, b):
    if not _is_node(a, b):
        av, bv = np.asarray(a), np.asarray(b)
        if av.shape != bv.shape:
            raise nx.ShapeError(f"add: shapes {av.shape} and {bv.shape} differ")
        return av + bv
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise nx.ShapeError(f"add: shapes {av.shape} and {bv.shape} differ")
    return Node(av + bv, _edges([(a, lambda g: g), (b, lambda g: g)]))


def linear(x, w, b=None):
    if not _is_node(x, w, b):
        return nx.linear(x, w, b)
    xv, wv = value_of(x), value_of(w)
    bv = value_of(b) if b is not None else None
    out = nx.linear(xv, wv, bv)
    pairs = [
        (x, lambda g: nx.matmul(g, np.ascontiguousarray(wv.T))),
        (w, lambda g: nx.matmul(np.ascontiguousarray(xv.T), g)),
    ]
    if b is not None:
        pairs.append((b, lambda g: g.sum(axis=0)))
    return Node(out, _edges(pairs))


def relu(x):
    if not _is_node(x):
        return nx.relu(x)
    xv = value_of(x)
    return Node(nx.relu(xv), _edges([(x, lambda g: g * (xv > 0))]))


def softmax_rows(m, scale=1.0):
    if not _is_node(m):
        return nx.softmax_rows(m, scale)
    mv = value_of(m)
    y = nx.softmax_rows(mv, scale)

    def pull(g):
        gu = y * (g - (g * y).sum(axis=1, keepdims=True))
        return gu / y.dtype.type(scale)

    return Node(y, _edges([(m, pull)]))


def layer_norm(x, gamma, beta, eps=nx.DEFAULT_LN_EPS):
    if not _is_node(x, gamma, beta):
        return nx.layer_norm(x, gamma, beta, eps)
    xv, gv, bv = value_of(x), value_of(gamma), value_of(beta)
    out = nx.layer_norm(xv, gv, bv, eps)
    return Node(out, _edges([
        (x, lambda g: nx.layer_norm_vjp(xv, gv, bv, eps, g)[0]),
        (gamma, lambda g: nx.layer_norm_vjp(xv, gv, bv, eps, g)[1]),
        (beta, lambda g: g.sum(axis=0)),
    ]))


def ffn(x, w1, b1, w2, b2):
    return linear(relu(linear(x, w1, b1)), w2, b2)


def transpose(x):
    if not _is_node(x):
        return np.ascontiguousarray(np.asarray(x).T)
    xv = value_of(x)
    return Node(np.ascontiguousarray(xv.T),
                _edges([(x, lambda g: np.ascontiguousarray(g.T))]))


def slice_cols(x, j0, j1):
    if not _is_node(x):
        return np.asarray(x)[:, j0:j1]
    xv = value_of(x)

    def pull(g):
        full = np.zeros_like(xv)
        full[:, j0:j1] = g
        return full

    return Node(xv[:, j0:j1], _edges([(x, pull)]))


def concat_cols(parts):
    parts = list(parts)
    if not _is_node(*parts):
        return np.concatenate(parts, axis=1)
    values = [value_of(p) for p in parts]
    widths = [v.shape[1] for v in values]
    offsets = np.concatenate([[0], np.cumsum(widths)])
    pairs = []
    for idx, p in enumerate(parts):
        j0, j1 = int(offsets[idx]), int(offsets[idx + 1])
        pairs.append((p, lambda g, j0=j0, j1=j1: g[:, j0:j1]))
    return Node(np.concatenate(values, axis=1), _edges(pairs))


def reshape2d(x, rows, cols):
    if not _is_node(x):
        return np.asarray(x).reshape(rows, cols)
    xv = value_of(x)
    return Node(xv.reshape(rows, cols),
                _edges([(x, lambda g: g.reshape(xv.shape))]))
