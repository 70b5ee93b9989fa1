"""Reverse-mode differentiation over dense float arrays.

Only the operations the dual-GRU classifier needs are defined. Each op
records its parents and a closure that pushes the output gradient back.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

DTYPE = np.float64
_mode = threading.local()


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    prev = getattr(_mode, "off", False)
    _mode.off = True
    try:
        yield
    finally:
        _mode.off = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape})"

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    if getattr(_mode, "off", False):
        return Tensor(data)
    parents = tuple(parents)
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (), _backward=backward if req else None)


def _acc(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            _acc(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw)


def linear(x, w, b):
    """``x @ w + b`` as one node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)

    def bw(g):
        if x.requires_grad:
            _acc(x, g @ w.data.T)
        if w.requires_grad:
            _acc(w, x.data.T @ g)
        if b.requires_grad:
            _acc(b, g.sum(axis=0))

    return _node(x.data @ w.data + b.data, (x, w, b), bw)


def sigmoid(x):
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g):
        _acc(x, g * out * (1.0 - out))

    return _node(out, (x,), bw)


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def bw(g):
        _acc(x, g * (1.0 - out * out))

    return _node(out, (x,), bw)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        _acc(x, g * mask)

    return _node(x.data * mask, (x,), bw)


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, cuts, axis=axis)):
            _acc(p, gp)

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def gru_scan(xw, u_zr, u_h, h0, offsets, batch_sizes):
    """Whole GRU recurrence over packed rows as one node.

    ``xw`` holds the input projections plus biases, ``(rows, 3H)`` in z, r, h
    order; step t owns rows ``offsets[t]:offsets[t] + batch_sizes[t]``, which
    are the first ``batch_sizes[t]`` sequences. Returns packed hidden states.
    The backward pass is truncated nowhere: it runs the full recurrence back.
    """
    xw, u_zr, u_h, h0 = (as_tensor(t) for t in (xw, u_zr, u_h, h0))
    H = u_h.shape[0]
    X, Uzr, Uh = xw.data, u_zr.data, u_h.data
    h = h0.data.copy()
    out = np.empty((X.shape[0], H), dtype=DTYPE)
    steps = [(int(o), int(n)) for o, n in zip(offsets, batch_sizes)]
    cache = []
    for off, n in steps:
        hp = h[:n].copy()
        a = X[off : off + n]
        zr = 0.5 * (1.0 + np.tanh(0.5 * (a[:, : 2 * H] + hp @ Uzr)))
        z, r = zr[:, :H], zr[:, H:]
        rh = r * hp
        c = np.tanh(a[:, 2 * H :] + rh @ Uh)
        hn = hp + z * (c - hp)
        out[off : off + n] = hn
        h[:n] = hn
        cache.append((hp, z, r, rh, c))

    def bw(g):
        gx = np.zeros_like(X)
        g_zr = np.zeros_like(Uzr)
        g_h = np.zeros_like(Uh)
        carry = np.zeros_like(h)
        for (off, n), (hp, z, r, rh, c) in zip(reversed(steps), reversed(cache)):
            gh = g[off : off + n] + carry[:n]
            dc = gh * z * (1.0 - c * c)
            dz = gh * (c - hp) * z * (1.0 - z)
            drh = dc @ Uh.T
            dr = drh * hp * r * (1.0 - r)
            dzr = np.concatenate([dz, dr], axis=1)
            gx[off : off + n, : 2 * H] = dzr
            gx[off : off + n, 2 * H :] = dc
            g_zr += hp.T @ dzr
            g_h += rh.T @ dc
            carry[:n] = gh * (1.0 - z) + drh * r + dzr @ Uzr.T
        _acc(xw, gx)
        _acc(u_zr, g_zr)
        _acc(u_h, g_h)
        _acc(h0, carry)

    return _node(out, (xw, u_zr, u_h, h0), bw)


def slice_rows(x, start, stop):
    x = as_tensor(x)

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[start:stop] = g
            _acc(x, full)

    return _node(x.data[start:stop], (x,), bw)


def slice_cols(x, start, stop):
    x = as_tensor(x)

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, start:stop] = g
            _acc(x, full)

    return _node(x.data[:, start:stop], (x,), bw)


def take_rows(x, index):
    """Gather rows; repeated indices accumulate gradient."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.add.at(full, index, g)
            _acc(x, full)

    return _node(x.data[index], (x,), bw)


def total(x):
    x = as_tensor(x)

    def bw(g):
        _acc(x, np.broadcast_to(g, x.shape))

    return _node(x.data.sum(), (x,), bw)


def mean(x):
    x = as_tensor(x)
    n = x.data.size

    def bw(g):
        _acc(x, np.broadcast_to(g / n, x.shape))

    return _node(x.data.mean(), (x,), bw)


def dropout(x, rate, rng, training=True):
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bw(g):
        _acc(x, g * keep)

    return _node(x.data * keep, (x,), bw)


P_MIN = 1e-7


def bce(p, y):
    """Mean binary cross-entropy with ``p`` clamped to [1e-7, 1 - 1e-7]."""
    p = as_tensor(p)
    y = np.asarray(y, dtype=DTYPE).reshape(p.shape)
    pc = np.clip(p.data, P_MIN, 1.0 - P_MIN)
    n = pc.size
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    inside = (p.data >= P_MIN) & (p.data <= 1.0 - P_MIN)

    def bw(g):
        _acc(p, g * inside * (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n)

    return _node(loss, (p,), bw)


def bce_loss(p, y) -> float:
    return float(bce(Tensor(p), y).data)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    # intermediate grads are dropped after use so repeated calls stay clean
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None


def grads(loss: Tensor, params) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params`` (zeros for unused ones)."""
    for p in params:
        p.grad = None
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
