"""Integer-similarity top-L key selection and the CSR pattern it induces.

Similarity between a query and a key is the number of sub-spaces in which
their PQ codes agree, an integer in ``[0, M]``. Selection is a bucket sort
over those ``M + 1`` score values: every bucket holds at most ``L`` keys (a
full bucket keeps overwriting its last slot), and buckets are drained from
score ``M`` downward until ``L`` keys are collected.

Keys are scanned newest first by default (``order="descending"``), so among
equal scores a bucket keeps the most recent keys plus the oldest one. With
``order="ascending"`` it keeps the oldest keys plus the newest one instead.

Two entry points compute the same thing: :func:`bucket_select_row` walks one
query's buckets literally, :func:`select_topl` reproduces its output for all
queries at once with array operations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .counters import record_flops
from .errors import ShapeError


@dataclass(frozen=True)
class TopLIndices:
    """Selected key positions for each query, stored ragged.

    ``indices[offsets[i]:offsets[i + 1]]`` are the keys of query ``i`` in
    retrieval order.
    """

    n_keys: int
    lengths: np.ndarray
    indices: np.ndarray

    @property
    def n(self) -> int:
        return len(self.lengths)

    @property
    def L_eff(self) -> np.ndarray:
        return self.lengths

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.lengths)]).astype(np.int64)

    def row(self, i: int) -> np.ndarray:
        off = self.offsets
        return self.indices[off[i] : off[i + 1]]

    def rows(self) -> list[np.ndarray]:
        return np.split(self.indices, self.offsets[1:-1])


@dataclass(frozen=True)
class CsrPattern:
    indptr: np.ndarray
    indices: np.ndarray
    n_cols: int

    def __post_init__(self):
        ip = self.indptr
        if ip.ndim != 1 or len(ip) < 2 or ip[0] != 0 or ip[-1] != len(self.indices):
            raise ShapeError("indptr must start at 0 and end at len(indices)")
        if np.any(np.diff(ip) < 0):
            raise ShapeError("indptr must be non-decreasing")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= self.n_cols):
            raise ShapeError("column index out of range")

    @property
    def n_rows(self) -> int:
        return len(self.indptr) - 1

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rows), np.diff(self.indptr))

    def to_dense_mask(self) -> np.ndarray:
        mask = np.zeros((self.n_rows, self.n_cols), dtype=bool)
        mask[self.row_ids(), self.indices] = True
        return mask


def indicator_score(cq, ck) -> int:
    """Number of sub-spaces where two code vectors agree."""
    cq, ck = np.asarray(cq), np.asarray(ck)
    if cq.shape != ck.shape or cq.ndim != 1:
        raise ShapeError(f"code vectors differ in length: {cq.shape} vs {ck.shape}")
    return int((cq == ck).sum())


def score_matrix(cq: np.ndarray, ck: np.ndarray) -> np.ndarray:
    """All-pairs indicator scores, shape ``(n_queries, n_keys)``."""
    cq, ck = np.asarray(cq), np.asarray(ck)
    if cq.ndim != 2 or ck.ndim != 2 or cq.shape[1] != ck.shape[1]:
        raise ShapeError(f"code arrays disagree on M: {cq.shape} vs {ck.shape}")
    s = np.zeros((cq.shape[0], ck.shape[0]), dtype=np.int32)
    for m in range(cq.shape[1]):
        s += cq[:, None, m] == ck[None, :, m]
    return s


ORDERS = ("descending", "ascending")


def _scan(n: int, order: str) -> range:
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}, got {order!r}")
    return range(n - 1, -1, -1) if order == "descending" else range(n)


def bucket_select_row(scores: np.ndarray, L: int, M: int, order: str = "descending") -> list[int]:
    """Bucket-sort top-``L`` for one query over its candidate keys.

    ``scores[j]`` is the score of key ``j``; keys with a negative score are
    not candidates. Keys enter the buckets in ``order`` of their index.
    """
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    bucket = np.full((M + 1, L), -1, dtype=np.int64)
    fill = np.zeros(M + 1, dtype=np.int64)
    for j in _scan(len(scores), order):
        s = scores[j]
        if s < 0:
            continue
        slot = min(fill[s], L - 1)
        assert slot <= L - 1
        bucket[s, slot] = j
        fill[s] = min(fill[s] + 1, L)
    out: list[int] = []
    s, ptr = M, 0
    while len(out) < L and s >= 0:
        if ptr == fill[s]:
            s, ptr = s - 1, 0
            continue
        out.append(int(bucket[s, ptr]))
        ptr += 1
    return out


def select_topl(cq: np.ndarray, ck: np.ndarray, L: int, causal: bool = False, order: str = "descending") -> TopLIndices:
    """Top-``L`` keys per query by indicator score.

    In causal mode query ``i`` only considers keys ``j <= i``. Rows with
    fewer candidates than ``L`` keep all of them. ``order`` is the key scan
    order that decides which of several equal-score keys survive.
    """
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    _scan(0, order)
    s = score_matrix(cq, ck)
    nq, nk = s.shape
    M = cq.shape[1]
    if causal:
        if nq != nk:
            raise ShapeError("causal selection needs as many queries as keys")
        cand = np.tril(np.ones((nq, nk), dtype=bool))
        s = np.where(cand, s, -1)
        n_cand = np.arange(1, nq + 1)
    else:
        n_cand = np.full(nq, nk)
    record_flops("topl_score", int(n_cand.sum()))
    if order == "descending":
        # scan position p holds key nk - 1 - p
        s = s[:, ::-1]

    # position of each key within its (query, score) bucket, and bucket sizes
    rank = np.zeros_like(s)
    count = np.zeros_like(s)
    for v in range(M + 1):
        hit = s == v
        c = np.cumsum(hit, axis=1, dtype=np.int32)
        rank = np.where(hit, c - 1, rank)
        count = np.where(hit, c[:, -1:], count)
    # a bucket keeps its first L-1 arrivals plus whichever key arrived last
    kept = (s >= 0) & ((rank < L - 1) | (rank == count - 1))
    order_key = np.where(kept, (M - s).astype(np.int64) * nk + np.arange(nk), np.iinfo(np.int64).max)
    take = min(L, nk)
    picked = np.argsort(order_key, axis=1, kind="stable")[:, :take]
    if order == "descending":
        picked = nk - 1 - picked
    lengths = np.minimum(n_cand, L)
    valid = np.arange(take)[None, :] < lengths[:, None]
    return TopLIndices(nk, lengths.astype(np.int64), picked[valid].astype(np.int64))


def build_csr(t: TopLIndices) -> CsrPattern:
    return CsrPattern(t.offsets, t.indices.astype(np.int64), t.n_keys)


def uniform_L(n: int, lam: float) -> int:
    """``max(1, floor(lam * n))``."""
    if not 0 < lam <= 1:
        raise ValueError(f"lambda must be in (0, 1], got {lam}")
    return max(1, int(np.floor(lam * n + 1e-9)))
