"""Dense and top-L sparse multi-head attention.

The sparse path computes attention only on a CSR pattern: SDDMM fills the
stored scores, a per-row softmax normalises them over the stored entries,
and SpMM applies them to the values. All heads of all sequences are packed
into one block-diagonal pattern, so a single pass of each kernel covers the
whole batch.

Selection (PQ codes, bucket top-L) produces integer indices only; the pattern
is a constant of the backward pass and gradients reach Q, K and V through the
attention values alone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .config import BlockConfig
from .counters import annotate, current_label, record_attention_entries, record_flops, track
from .errors import DegenerateRowError, ShapeError
from .lora import Linear, LoraLinear
from .pq import Codebooks, assign_codes, init_codebooks, quantization_error, update_codebooks
from .tensor import Tensor, matmul, mul, reshape, softmax, transpose
from .topl import CsrPattern, TopLIndices, select_topl

_CHUNK = 1 << 16


@dataclass(eq=False)
class CsrAttention:
    pattern: CsrPattern
    values: Tensor

    def __post_init__(self):
        if self.values.shape != (self.pattern.nnz,):
            raise ShapeError(f"{self.values.shape} values for {self.pattern.nnz} stored entries")

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.pattern.n_rows, self.pattern.n_cols), dtype=self.values.dtype)
        out[self.pattern.row_ids(), self.pattern.indices] = self.values.data
        return out


def _csr(p: CsrPattern, vals: np.ndarray) -> sp.csr_matrix:
    return sp.csr_matrix((vals, p.indices, p.indptr), shape=(p.n_rows, p.n_cols))


def sddmm(p: CsrPattern, Q: Tensor, K: Tensor) -> CsrAttention:
    """Scores ``q_i . k_j`` for the stored ``(i, j)`` of ``p`` only."""
    if Q.ndim != 2 or K.ndim != 2 or Q.shape[1] != K.shape[1]:
        raise ShapeError(f"Q {Q.shape} and K {K.shape} must be matrices of equal width")
    if p.n_rows != Q.shape[0] or p.n_cols != K.shape[0]:
        raise ShapeError(f"pattern {p.n_rows}x{p.n_cols} does not match Q {Q.shape}, K {K.shape}")
    rows, cols = p.row_ids(), p.indices
    qd, kd = Q.data, K.data
    vals = np.empty(p.nnz, dtype=qd.dtype)
    for lo in range(0, p.nnz, _CHUNK):
        hi = lo + _CHUNK
        vals[lo:hi] = np.einsum("ed,ed->e", qd[rows[lo:hi]], kd[cols[lo:hi]])
    work = p.nnz * Q.shape[1]
    label = current_label()
    record_flops("sddmm", work)

    def bw(g):
        gm = _csr(p, g)
        gq = gk = None
        if Q.requires_grad:
            record_flops("sddmm_grad", work, label)
            gq = gm @ kd
        if K.requires_grad:
            record_flops("sddmm_grad", work, label)
            gk = gm.T @ qd
        return gq, gk

    return CsrAttention(p, Tensor._make(vals, (Q, K), bw, "sddmm"))


def _segment_max(vals: np.ndarray, p: CsrPattern) -> np.ndarray:
    out = np.full(p.n_rows, -np.inf, dtype=vals.dtype)
    nonempty = np.diff(p.indptr) > 0
    if nonempty.all():
        return np.maximum.reduceat(vals, p.indptr[:-1])
    np.maximum.at(out, p.row_ids(), vals)
    return out


def sparse_row_softmax(a: CsrAttention, causal: bool = False) -> CsrAttention:
    """Softmax over each row's stored entries.

    With ``causal`` set, stored entries with column > row are excluded and
    come out exactly 0.
    """
    p = a.pattern
    rows = p.row_ids()
    x = a.values.data
    keep = p.indices <= rows if causal else np.ones(p.nnz, dtype=bool)
    live = np.bincount(rows[keep], minlength=p.n_rows)
    if np.any(live == 0):
        raise DegenerateRowError(f"{int((live == 0).sum())} attention rows have no unmasked entry")
    masked = np.where(keep, x, -np.inf)
    shifted = masked - _segment_max(masked, p)[rows]
    e = np.where(keep, np.exp(shifted), 0.0)
    denom = np.bincount(rows, weights=e, minlength=p.n_rows)
    y = (e / denom[rows]).astype(x.dtype)

    def bw(g):
        dot = np.bincount(rows, weights=g * y, minlength=p.n_rows)
        return (y * (g - dot[rows]),)

    return CsrAttention(p, Tensor._make(y, (a.values,), bw, "sparse_softmax"))


def spmm(a: CsrAttention, V: Tensor) -> Tensor:
    """``Y = A' @ V`` for a CSR ``A'``."""
    p = a.pattern
    if V.ndim != 2 or V.shape[0] != p.n_cols:
        raise ShapeError(f"V {V.shape} does not match pattern with {p.n_cols} columns")
    vd = V.data
    vals = a.values.data
    work = p.nnz * V.shape[1]
    label = current_label()
    record_flops("spmm", work)
    out = np.asarray(_csr(p, vals) @ vd, dtype=vd.dtype)
    rows, cols = p.row_ids(), p.indices

    def bw(g):
        ga = gv = None
        if a.values.requires_grad:
            record_flops("spmm_grad", work, label)
            ga = np.empty(p.nnz, dtype=g.dtype)
            for lo in range(0, p.nnz, _CHUNK):
                hi = lo + _CHUNK
                ga[lo:hi] = np.einsum("ed,ed->e", g[rows[lo:hi]], vd[cols[lo:hi]])
        if V.requires_grad:
            record_flops("spmm_grad", work, label)
            gv = _csr(p, vals).T @ g
        return ga, gv

    return Tensor._make(out, (a.values, V), bw, "spmm")


def sparse_attention(Q: Tensor, K: Tensor, V: Tensor, p: CsrPattern, causal: bool = False, scale: bool = False) -> Tensor:
    """sddmm -> (scale) -> sparse softmax -> spmm on a fixed pattern."""
    a = sddmm(p, Q, K)
    if scale:
        a = CsrAttention(p, mul(a.values, 1.0 / math.sqrt(Q.shape[1])))
    return spmm(sparse_row_softmax(a, causal=causal), V)


def merge_patterns(per_block: list[TopLIndices], n: int) -> CsrPattern:
    """Block-diagonal pattern from per-sequence selections of ``n`` keys each."""
    lengths = np.concatenate([t.lengths for t in per_block])
    indices = np.concatenate([t.indices + b * n for b, t in enumerate(per_block)])
    total = n * len(per_block)
    idx_t = np.int32 if total < 2**31 - 1 and len(indices) < 2**31 - 1 else np.int64
    indptr = np.concatenate([[0], np.cumsum(lengths)]).astype(idx_t)
    p = CsrPattern(indptr, indices.astype(idx_t), total)
    track(p, p.indptr.nbytes + p.indices.nbytes)
    return p


# -- multi-head wrappers --------------------------------------------------------
Projection = Linear | LoraLinear


@dataclass(eq=False)
class MhaWeights:
    q: Projection
    k: Projection
    v: Projection
    o: Projection
    heads: int

    def named_layers(self) -> dict[str, Projection]:
        return {"linear_q": self.q, "linear_k": self.k, "linear_v": self.v, "linear_o": self.o}


def _as_batch(x: Tensor) -> Tensor:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise ShapeError(f"expected [batch, n, d_model] input, got {x.shape}")
    return x


def _split_heads(t: Tensor, b: int, n: int, h: int) -> Tensor:
    dh = t.shape[-1] // h
    return reshape(transpose(reshape(t, (b, n, h, dh)), (0, 2, 1, 3)), (b * h, n, dh))


def _merge_heads(t: Tensor, b: int, n: int, h: int) -> Tensor:
    dh = t.shape[-1]
    return reshape(transpose(reshape(t, (b, h, n, dh)), (0, 2, 1, 3)), (b, n, h * dh))


def _project(x: Tensor, w: MhaWeights) -> tuple[Tensor, Tensor, Tensor]:
    b, n, d = x.shape
    if d % w.heads:
        raise ShapeError(f"d_model {d} not divisible by {w.heads} heads")
    return tuple(_split_heads(layer(x), b, n, w.heads) for layer in (w.q, w.k, w.v))


def dense_mha(x: Tensor, w: MhaWeights, causal: bool = False, scale: bool = False) -> Tensor:
    """Reference attention with the full ``n x n`` weight matrix per head."""
    squeeze = x.ndim == 2
    x = _as_batch(x)
    b, n, _ = x.shape
    q, k, v = _project(x, w)
    scores = matmul(q, transpose(k, (0, 2, 1)))
    if scale:
        scores = mul(scores, 1.0 / math.sqrt(q.shape[-1]))
    mask = np.tril(np.ones((n, n), dtype=bool)) if causal else None
    weights = softmax(scores, mask)
    record_attention_entries(weights.data.size)
    y = w.o(_merge_heads(matmul(weights, v), b, n, w.heads))
    return reshape(y, y.shape[1:]) if squeeze else y


@dataclass(eq=False)
class PQState:
    """Codebooks shared by queries and keys of one attention layer.

    Initialised lazily from the first batch; refreshed by a Lloyd step on the
    most recently seen query/key vectors every ``period`` steps.
    """

    d_sub: int = 8
    E: int = 16
    period: int = 20
    seed: int = 0
    codebooks: Codebooks | None = None
    last: np.ndarray | None = field(default=None, repr=False)

    def ensure(self, q: np.ndarray, k: np.ndarray) -> Codebooks:
        if self.codebooks is None:
            self.codebooks = init_codebooks(np.concatenate([q, k]), self.d_sub, self.E, self.seed)
        return self.codebooks

    def observe(self, q: np.ndarray, k: np.ndarray) -> None:
        self.last = np.concatenate([q, k])

    def step(self, step: int) -> bool:
        """Apply the periodic update for ``step``; True when codebooks changed."""
        if self.codebooks is None or self.last is None:
            return False
        new = update_codebooks(self.codebooks, self.last, step, self.period)
        changed = new is not self.codebooks
        self.codebooks = new
        return changed

    def error(self) -> float:
        if self.codebooks is None or self.last is None:
            return float("nan")
        return quantization_error(self.last, self.codebooks, assign_codes(self.last, self.codebooks))


SelectFn = Callable[[np.ndarray, np.ndarray, int, bool], TopLIndices]


def sparse_mha(
    x: Tensor,
    w: MhaWeights,
    cfg: BlockConfig,
    pq: PQState | None = None,
    select_fn: SelectFn | None = None,
) -> Tensor:
    """Top-L sparse attention over PQ-selected keys.

    ``select_fn(q_head, k_head, L, causal)`` may replace PQ selection (used
    to force exact selections in tests).
    """
    squeeze = x.ndim == 2
    x = _as_batch(x)
    b, n, _ = x.shape
    sc = cfg.sparsity
    q, k, v = _project(x, w)
    bh, dh = q.shape[0], q.shape[2]
    L = sc.L(n)
    prefilter = cfg.causal and sc.causal_mode == "prefilter"
    qd, kd = q.data.reshape(bh * n, dh), k.data.reshape(bh * n, dh)
    if select_fn is None:
        if pq is None:
            pq = PQState(sc.d_sub, sc.E, sc.codebook_period)
        cb = pq.ensure(qd, kd)
        pq.observe(qd, kd)
        with annotate("pq"):
            cq = assign_codes(qd, cb).reshape(bh, n, -1)
            ck = assign_codes(kd, cb).reshape(bh, n, -1)
            picks = [select_topl(cq[i], ck[i], L, causal=prefilter, order=sc.scan_order) for i in range(bh)]
    else:
        picks = [select_fn(qd[i * n : (i + 1) * n], kd[i * n : (i + 1) * n], L, prefilter) for i in range(bh)]
    pattern = merge_patterns(picks, n)
    record_attention_entries(pattern.nnz)
    y = sparse_attention(
        reshape(q, (bh * n, dh)),
        reshape(k, (bh * n, dh)),
        reshape(v, (bh * n, dh)),
        pattern,
        causal=cfg.causal and not prefilter,
        scale=sc.scale_scores,
    )
    out = w.o(_merge_heads(reshape(y, (bh, n, dh)), b, n, w.heads))
    return reshape(out, out.shape[1:]) if squeeze else out
