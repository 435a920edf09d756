"""Dense tensors with reverse-mode automatic differentiation.

Each op returns a new :class:`Tensor` that remembers its parents and a closure
that pushes the upstream gradient back to them. ``backward`` builds a
topological order of the graph (the tape) and replays the closures in reverse.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the engine's floating dtype (float64 is for gradient tests)."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DTYPE)
        elif arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def _accumulate(self, g, owned=False):
        # owned: g is a temporary nobody else references, so it can be adopted
        if self.grad is None:
            if owned and g.dtype == self.data.dtype and g.flags.writeable:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_lift(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward_fn):
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    if needs:
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tensor that requires it."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    # iterative DFS keeps the order fixed and avoids recursion limits on deep graphs
    topo, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # interior buffers are released; only leaves keep their gradient
    for node in topo:
        if node._parents:
            node.grad = None
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _lift(a), _lift(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def mul(a, b):
    """Elementwise product; ``b`` may be a python scalar."""
    a = _lift(a)
    if not isinstance(b, Tensor):
        c = float(b)

        def bw_scalar(g):
            a._accumulate(g * c, owned=True)

        return _make(a.data * a.data.dtype.type(c), (a,), "scale", bw_scalar)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * s

    def bw(g):
        x._accumulate(g * (s * (1.0 + x.data * (1.0 - s))), owned=True)

    return _make(y, (x,), "silu", bw)


def tsum(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.sum(x.data, dtype=x.data.dtype), (x,), "sum", bw)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _make(np.mean(x.data, dtype=x.data.dtype), (x,), "mean", bw)


def detach(x: Tensor) -> Tensor:
    """Same value, no gradient path back to ``x``."""
    return Tensor(x.data, requires_grad=False, _op="detach")


def straight_through(x: Tensor, value) -> Tensor:
    """Forward ``value``; backward passes the upstream gradient to ``x`` unchanged.

    Numerically this is ``x + detach(value - x)`` without the round-off of the
    add/subtract pair, so the forward result is exactly ``value``.
    """
    value = np.asarray(value, dtype=x.data.dtype)
    if value.shape != x.shape:
        raise ValueError(f"straight_through shape mismatch: {x.shape} vs {value.shape}")

    def bw(g):
        x._accumulate(g)

    return _make(value, (x,), "straight_through", bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must agree or ``b`` is 2-D."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)), owned=True)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n), owned=True)
            else:
                b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g), owned=True)

    return _make(np.matmul(a.data, b.data), (a, b), "matmul", bw)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for x[..., in] and w[out, in]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear dimension mismatch: input {x.shape}, weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[1])
    y = (x2 @ w.data.T).reshape(*lead, w.shape[0])

    def bw(g):
        g2 = g.reshape(-1, w.shape[0])
        if x.requires_grad:
            x._accumulate((g2 @ w.data).reshape(x.shape), owned=True)
        if w.requires_grad:
            w._accumulate(g2.T @ x2, owned=True)

    return _make(y, (x, w), "linear", bw)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), "reshape", bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        x._accumulate(np.transpose(g, inv))

    return _make(np.transpose(x.data, axes), (x,), "transpose", bw)


# ---------------------------------------------------------------- nn primitives


def rmsnorm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Divide each row (last axis) by its root-mean-square. No learned scale."""
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + x.data.dtype.type(eps))
    y = x.data * r

    def bw(g):
        gy = np.mean(g * y, axis=-1, keepdims=True)
        x._accumulate(r * (g - y * gy), owned=True)

    return _make(y, (x,), "rmsnorm", bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(y * (g - np.sum(g * y, axis=axis, keepdims=True)), owned=True)

    return _make(y, (x,), "softmax", bw)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        weight._accumulate(gw, owned=True)

    return _make(weight.data[ids], (weight,), "embedding", bw)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]."""
    targets = np.asarray(targets).reshape(-1)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    if flat.shape[0] != targets.shape[0]:
        raise ValueError(f"cross-entropy: {flat.shape[0]} rows but {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    n = flat.shape[0]
    logp = log_softmax_np(flat)
    rows = np.arange(n)
    loss = -np.mean(logp[rows, targets], dtype=flat.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        logits._accumulate((p * (g / n)).reshape(logits.shape), owned=True)

    return _make(loss, (logits,), "cross_entropy", bw)


def causal_mask(t: int, dtype=None) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, a large negative above."""
    dtype = dtype or _DTYPE
    m = np.triu(np.ones((t, t), dtype=bool), k=1)
    return np.where(m, dtype(-1e9), dtype(0.0)).astype(dtype)


def global_norm(tensors) -> float:
    sq = 0.0
    for t in tensors:
        if t.grad is not None:
            sq += float(np.sum(np.square(t.grad, dtype=np.float64)))
    return math.sqrt(sq)
