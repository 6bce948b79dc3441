"""Router-driven FFN that only touches the activated weight groups.

The inner dimension ``D`` of the FFN is cut into ``G`` equal groups. Group
``g`` owns columns ``[g*D/G, (g+1)*D/G)`` of ``W_I`` and the same rows of
``W_O``. A linear router scores every group per token and the ``G'`` scores
of largest magnitude pick the groups a token runs through.

Execution goes block by block: gather the tokens that chose the block, run
them through its slice of both projections, scatter the results back. Cost is
proportional to the number of (token, group) pairs, not to ``n * G``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .counters import annotate
from .errors import ConfigError, ShapeError
from .lora import Linear, LoraLinear
from .rng import make_rng
from .tensor import (
    Tensor,
    add,
    gelu,
    getitem,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scatter_rows,
    sigmoid,
    softmax,
    tabs,
    take_rows,
    tsum,
)

Projection = Linear | LoraLinear
_ACT = {"relu": relu, "gelu": gelu}


@dataclass(eq=False)
class GroupedFfnWeights:
    W_I: Projection
    W_O: Projection
    W_R: Tensor
    G: int
    G_active: int
    activation: str = "relu"
    gated: bool = True

    def __post_init__(self):
        d, D = self.W_I.d_in, self.W_I.d_out
        if (self.W_O.d_in, self.W_O.d_out) != (D, d):
            raise ShapeError(f"W_O is {self.W_O.d_in}x{self.W_O.d_out}, expected {D}x{d}")
        if self.W_R.shape != (d, self.G):
            raise ShapeError(f"W_R is {self.W_R.shape}, expected {(d, self.G)}")
        if D % self.G:
            raise ConfigError(f"inner width {D} not divisible by G={self.G}")
        if not 1 <= self.G_active <= self.G:
            raise ConfigError(f"need 1 <= G' <= G, got G'={self.G_active}, G={self.G}")
        if self.activation not in _ACT:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, d: int, D: int, G: int, G_active: int, seed: int, *path, activation: str = "relu", gated: bool = True):
        w_i = Linear.init(d, D, seed, *path, "W_I")
        w_o = Linear.init(D, d, seed, *path, "W_O")
        rng = make_rng(seed, *path, "W_R")
        w_r = Tensor(rng.normal(scale=1.0 / np.sqrt(d), size=(d, G)), requires_grad=True)
        return cls(w_i, w_o, w_r, G, G_active, activation, gated)

    @property
    def d(self) -> int:
        return self.W_I.d_in

    @property
    def D(self) -> int:
        return self.W_I.d_out

    @property
    def block(self) -> int:
        return self.D // self.G

    @property
    def uses_gates(self) -> bool:
        # with every group active there is nothing to choose between
        return self.gated and self.G_active < self.G


@dataclass(eq=False)
class RouteDecision:
    """Groups chosen per token.

    ``ids[t]`` lists token ``t``'s groups by decreasing ``|x_R|``. ``probs``
    is ``softmax(|x_R|)`` per token. ``gates`` is ``sigmoid(x_R)`` over all
    groups, or None when every gate is 1.
    """

    ids: np.ndarray
    x_R: Tensor
    probs: Tensor
    gates: Tensor | None

    @property
    def n(self) -> int:
        return self.ids.shape[0]

    @property
    def G(self) -> int:
        return self.x_R.shape[1]

    def gate_values(self) -> np.ndarray:
        if self.gates is None:
            return np.ones(self.ids.shape, dtype=self.x_R.dtype)
        return np.take_along_axis(self.gates.data, self.ids, axis=1)

    def counts(self) -> np.ndarray:
        """Tokens per group."""
        return np.bincount(self.ids.ravel(), minlength=self.G)

    def mask(self) -> np.ndarray:
        m = np.zeros((self.n, self.G), dtype=bool)
        np.put_along_axis(m, self.ids, True, axis=1)
        return m


def top_groups(x_R: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest ``|x_R|`` per row, lower index first on ties."""
    order = np.argsort(-np.abs(x_R), axis=1, kind="stable")
    return order[:, :k]


def route(X: Tensor, w: GroupedFfnWeights, ids: np.ndarray | None = None) -> RouteDecision:
    """Score groups with ``X @ W_R`` and keep the top ``G'`` per token.

    Passing ``ids`` pins the selection (the scores, gates and probabilities
    are still recomputed from ``X``).
    """
    if X.ndim != 2 or X.shape[1] != w.d:
        raise ShapeError(f"router input {X.shape} does not match width {w.d}")
    with annotate("router"):
        x_r = matmul(X, w.W_R)
    if ids is None:
        ids = top_groups(x_r.data, w.G_active)
    else:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape != (X.shape[0], w.G_active):
            raise ShapeError(f"route ids {ids.shape} != {(X.shape[0], w.G_active)}")
        if ids.min() < 0 or ids.max() >= w.G or np.any(np.diff(np.sort(ids, axis=1), axis=1) == 0):
            raise ShapeError("route ids must be distinct groups in [0, G)")
    gates = sigmoid(x_r) if w.uses_gates else None
    # selection ranks |x_R|, so the balance probabilities follow |x_R| too
    return RouteDecision(ids, x_r, softmax(tabs(x_r)), gates)


def _columns(t: Tensor, a: int, b: int) -> Tensor:
    return getitem(t, (slice(None), slice(a, b)))


def _rows(t: Tensor, a: int, b: int) -> Tensor:
    return getitem(t, slice(a, b))


def bspmv_ffn(X: Tensor, w: GroupedFfnWeights, r: RouteDecision) -> Tensor:
    """FFN over the activated groups only, one weight block at a time."""
    n = X.shape[0]
    if X.ndim != 2 or X.shape[1] != w.d:
        raise ShapeError(f"FFN input {X.shape} does not match width {w.d}")
    if r.n != n or r.G != w.G or r.ids.shape[1] != w.G_active:
        raise ShapeError("route decision does not match the input or the weights")
    act = _ACT[w.activation]
    lora_i = isinstance(w.W_I, LoraLinear)
    lora_o = isinstance(w.W_O, LoraLinear)
    xb = matmul(X, w.W_I.B) if lora_i else None
    mask = r.mask()
    y: Tensor | None = None
    z: Tensor | None = None  # rank-r partial of the W_O adapter, shared by all blocks
    for g in range(w.G):
        tok = np.flatnonzero(mask[:, g])
        if len(tok) == 0:
            continue
        a, b = g * w.block, (g + 1) * w.block
        xg = take_rows(X, tok)
        h = matmul(xg, _columns(w.W_I.W, a, b))
        if lora_i:
            h = h + matmul(take_rows(xb, tok), _columns(w.W_I.C, a, b))
        h = act(h)
        out = matmul(h, _rows(w.W_O.W, a, b))
        part = matmul(h, _rows(w.W_O.B, a, b)) if lora_o else None
        if r.gates is not None:
            gate = reshape(getitem(r.gates, (tok, np.full(len(tok), g))), (len(tok), 1))
            out = mul(out, gate)
            part = mul(part, gate) if part is not None else None
        out = scatter_rows(out, tok, n)
        y = out if y is None else add(y, out)
        if part is not None:
            part = scatter_rows(part, tok, n)
            z = part if z is None else add(z, part)
    if z is not None:
        y = add(y, matmul(z, w.W_O.C))
    return y


def load_balance_loss(r: RouteDecision, probs: Tensor | None = None) -> Tensor:
    """``G * sum_g f_g * mean_prob_g``, equal to 1 under uniform routing.

    ``f_g`` is group ``g``'s share of all ``n * G'`` (token, group) pairs.
    """
    probs = r.probs if probs is None else probs
    k = r.ids.shape[1]
    f = r.counts().astype(probs.dtype) / (r.n * k)
    return tsum(mul(mean(probs, axis=0), Tensor(f * r.G, dtype=probs.dtype)))


def dense_ffn(X: Tensor, W_I, W_O, activation: str = "relu") -> Tensor:
    """``act(X @ W_I) @ W_O``; weights may be tensors or projections."""
    act = _ACT[activation]
    first = W_I(X) if callable(W_I) else matmul(X, W_I)
    h = act(first)
    return W_O(h) if callable(W_O) else matmul(h, W_O)


def routed_ffn(X: Tensor, w: GroupedFfnWeights) -> tuple[Tensor, RouteDecision]:
    r = route(X, w)
    return bspmv_ffn(X, w, r), r


def bsr_mask_bytes(batch: int, seq: int, d_model: int, d_ffn: int, G: int, mask_bytes: int = 1, index_bytes: int = 4) -> int:
    """Bytes of per-token dense weight masks a block-sparse kernel would need.

    Each token carries a mask over both FFN weight matrices plus its block
    index list. Nothing is allocated; this is arithmetic only.
    """
    tokens = batch * seq
    return tokens * 2 * d_model * d_ffn * mask_bytes + tokens * G * index_bytes
