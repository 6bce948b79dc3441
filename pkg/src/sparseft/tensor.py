"""Dense tensors with reverse-mode differentiation.

A ``Tensor`` wraps a numpy buffer. Operations on tensors that require
gradients record their parents and a backward closure; ``backward`` replays
the recorded graph in reverse topological order and accumulates ``.grad`` on
leaves. Matrix products report their cost to :mod:`sparseft.counters` in both
directions.
"""
from __future__ import annotations

import contextvars
import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .counters import current_label, record_flops, track
from .errors import DegenerateRowError, NonFiniteError, ShapeError

_DTYPE: contextvars.ContextVar[type] = contextvars.ContextVar("sparseft_dtype", default=np.float32)
_GRAD: contextvars.ContextVar[bool] = contextvars.ContextVar("sparseft_grad", default=True)

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPE.get())


@contextmanager
def precision(dtype: type | np.dtype) -> Iterator[None]:
    """Make ``dtype`` the element type of tensors created inside the block."""
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


@contextmanager
def no_grad() -> Iterator[None]:
    token = _GRAD.set(False)
    try:
        yield
    finally:
        _GRAD.reset(token)


def grad_enabled() -> bool:
    return _GRAD.get()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype(), copy=True)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"empty extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None
        self.op = "leaf"
        track(self, arr.nbytes)

    @classmethod
    def _make(
        cls,
        data: np.ndarray,
        parents: tuple["Tensor", ...],
        backward: Backward | None,
        op: str,
        view: bool = False,
    ) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced a non-finite value")
        t = object.__new__(cls)
        t.data = data
        t.grad = None
        t.op = op
        t.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if t.requires_grad:
            t._parents = parents
            t._backward = backward
        else:
            t._parents = ()
            t._backward = None
        if not view:
            track(t, data.nbytes)
        return t

    # -- convenience -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._make(self.data, (), None, "detach", view=True)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return Tensor._make(a.data * c, (a,), lambda g: (g * c,), "scale")
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (x,), bw, "gelu")


def tabs(x: Tensor) -> Tensor:
    """Elementwise ``|x|``; the subgradient at 0 is taken as 0."""
    sign = np.sign(x.data)
    return Tensor._make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)  # non-finite results are reported by _make
    return Tensor._make(out, (x,), lambda g: (g / xd,), "log")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- shape -------------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    view = np.shares_memory(out, x.data)
    return Tensor._make(out, (x,), lambda g: (g.reshape(old),), "reshape", view=view)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(
        x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose", view=True
    )


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    out = x.data[idx]
    view = np.shares_memory(out, x.data)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(np.asarray(out), (x,), bw, "getitem", view=view)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``x[idx]`` (first axis)."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(x.data[idx], (x,), bw, "take_rows")


def scatter_rows(src: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Return an ``n``-row tensor with ``src`` rows summed into positions ``idx``."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, idx, src.data)
    return Tensor._make(out, (src,), lambda g: (g[idx],), "scatter_rows")


# -- products ----------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``(..., m, k) @ (k, p)`` or matching batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch dimensions differ: {a.shape} @ {b.shape}")
    m, k = a.shape[-2:]
    p = b.shape[-1]
    batch = int(np.prod(a.shape[:-2], dtype=np.int64))
    flops = batch * m * k * p
    label = current_label()
    record_flops("matmul", flops, label)
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            record_flops("matmul_grad", flops, label)
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            record_flops("matmul_grad", flops, label)
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, k).T @ g.reshape(-1, p)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), bw, "matmul")


# -- normalisation -----------------------------------------------------------
def _softmax_data(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        if not np.all(mask.any(axis=-1)):
            raise DegenerateRowError("softmax row has every entry masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along the last axis; entries where ``mask`` is False become 0."""
    y = _softmax_data(x.data, None if mask is None else np.asarray(mask, dtype=bool))

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._make(y, (x,), bw, "softmax")


def row_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax of a matrix with an optional boolean keep-mask."""
    if x.ndim != 2:
        raise ShapeError(f"row_softmax expects a matrix, got {x.shape}")
    if mask is not None and np.shape(mask) != x.shape:
        raise ShapeError(f"mask shape {np.shape(mask)} != {x.shape}")
    return softmax(x, mask)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._make(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean token cross-entropy; ``weights`` (0/1 per row) selects rows to average."""
    if logits.ndim != 2:
        raise ShapeError("cross_entropy expects (tokens, classes) logits")
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    w = np.ones(n, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    denom = float(w.sum())
    ld = logits.data
    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -(logp[np.arange(n), targets] * w).sum() / denom

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (g * p * (w[:, None] / denom),)

    return Tensor._make(np.asarray(loss, dtype=ld.dtype), (logits,), bw, "cross_entropy")


# -- differentiation -----------------------------------------------------------
def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
        if not retain_graph:
            node._parents = ()
            node._backward = None
