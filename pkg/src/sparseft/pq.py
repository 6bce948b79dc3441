"""Product quantization of query/key vectors.

A vector of width ``d`` is cut into ``M`` consecutive sub-vectors of width
``d_sub`` (the last one narrower when ``d`` is not a multiple), and each
sub-vector is replaced by the index of its nearest codeword in that
sub-space's codebook. Codes are plain ``(n, M)`` integer arrays.

Codebooks are refreshed with one hard-assignment Lloyd step every ``period``
mini-batches; no gradient ever flows through code assignment.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .counters import record_flops
from .errors import ShapeError
from .rng import make_rng

_CHUNK = 1 << 15


def subspace_widths(d: int, d_sub: int) -> list[int]:
    """Widths of the sub-spaces a ``d``-vector is split into."""
    if d <= 0 or d_sub <= 0:
        raise ShapeError(f"need positive d and d_sub, got {d}, {d_sub}")
    m = -(-d // d_sub)
    return [d_sub] * (m - 1) + [d - (m - 1) * d_sub]


@dataclass(frozen=True)
class Codebooks:
    """``M`` codebooks of ``E`` codewords each.

    ``words[m]`` has shape ``(E, width_m)``; every width equals ``d_sub``
    except possibly the last.
    """

    words: tuple[np.ndarray, ...]
    d_sub: int

    def __post_init__(self):
        if not self.words:
            raise ShapeError("at least one codebook is required")
        e = self.words[0].shape[0]
        widths = [w.shape[1] for w in self.words]
        if any(w.shape[0] != e for w in self.words):
            raise ShapeError("codebooks disagree on codeword count")
        if widths != subspace_widths(sum(widths), self.d_sub):
            raise ShapeError(f"codeword widths {widths} do not tile with d_sub={self.d_sub}")

    @classmethod
    def from_array(cls, words: np.ndarray) -> "Codebooks":
        words = np.asarray(words)
        if words.ndim != 3:
            raise ShapeError(f"expected (M, E, d_sub) array, got {words.shape}")
        return cls(tuple(np.array(w) for w in words), words.shape[2])

    @property
    def M(self) -> int:
        return len(self.words)

    @property
    def E(self) -> int:
        return self.words[0].shape[0]

    @property
    def dim(self) -> int:
        return sum(w.shape[1] for w in self.words)

    @property
    def num_parameters(self) -> int:
        return self.E * self.dim

    def bounds(self) -> list[tuple[int, int]]:
        out, start = [], 0
        for w in self.words:
            out.append((start, start + w.shape[1]))
            start += w.shape[1]
        return out

    def reconstruct(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes)
        return np.concatenate([w[codes[:, m]] for m, w in enumerate(self.words)], axis=1)

    def to_bytes(self) -> bytes:
        """Little-endian blob: int32 M, E, d_sub, then float32 codewords."""
        head = struct.pack("<iii", self.M, self.E, self.d_sub)
        body = b"".join(np.ascontiguousarray(w, dtype="<f4").tobytes() for w in self.words)
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Codebooks":
        m, e, d_sub = struct.unpack_from("<iii", blob, 0)
        flat = np.frombuffer(blob, dtype="<f4", offset=12)
        if flat.size % e:
            raise ShapeError("codebook blob length does not match its header")
        widths = subspace_widths(flat.size // e, d_sub)
        if len(widths) != m:
            raise ShapeError("codebook blob length does not match its header")
        words, pos = [], 0
        for w in widths:
            words.append(flat[pos : pos + e * w].reshape(e, w).astype(np.float32))
            pos += e * w
        return cls(tuple(words), d_sub)


def _data(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x))


def _check(x: np.ndarray, cb: Codebooks) -> None:
    if x.ndim != 2 or x.shape[1] != cb.dim:
        raise ShapeError(f"vectors of shape {x.shape} do not match codebook width {cb.dim}")


def _sq_dist(xs: np.ndarray, words: np.ndarray) -> np.ndarray:
    diff = xs[:, None, :] - words[None, :, :]
    return np.einsum("nek,nek->ne", diff, diff)


def assign_codes(x, cb: Codebooks) -> np.ndarray:
    """Nearest-codeword index per sub-space, shape ``(n, M)``.

    Ties go to the lowest codeword index.
    """
    x = _data(x)
    _check(x, cb)
    n = x.shape[0]
    codes = np.empty((n, cb.M), dtype=np.int64)
    for m, ((a, b), words) in enumerate(zip(cb.bounds(), cb.words)):
        words = words.astype(x.dtype, copy=False)
        for lo in range(0, n, _CHUNK):
            codes[lo : lo + _CHUNK, m] = _sq_dist(x[lo : lo + _CHUNK, a:b], words).argmin(axis=1)
    record_flops("pq_assign", n * cb.dim * cb.E)
    return codes


def _residuals(x: np.ndarray, cb: Codebooks, codes: np.ndarray) -> np.ndarray:
    """Per-row, per-codebook squared distance to the selected codeword."""
    out = np.empty((x.shape[0], cb.M), dtype=np.float64)
    for m, ((a, b), words) in enumerate(zip(cb.bounds(), cb.words)):
        diff = x[:, a:b].astype(np.float64) - words[codes[:, m]].astype(np.float64)
        out[:, m] = (diff * diff).sum(axis=1)
    return out


def quantization_error(x, cb: Codebooks, codes: np.ndarray) -> float:
    """Mean over rows of the summed squared sub-vector reconstruction error."""
    x = _data(x)
    _check(x, cb)
    codes = np.asarray(codes)
    if codes.shape != (x.shape[0], cb.M):
        raise ShapeError(f"codes shape {codes.shape} != {(x.shape[0], cb.M)}")
    if x.shape[0] == 0:
        return 0.0
    return float(_residuals(x, cb, codes).sum(axis=1).mean())


def _seed_one(sub: np.ndarray, e: int, rng: np.random.Generator) -> np.ndarray:
    # k-means++ seeding over distinct sub-vectors
    uniq = np.unique(sub, axis=0)
    chosen = [int(rng.integers(len(uniq)))]
    d2 = ((uniq - uniq[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < min(e, len(uniq)):
        total = d2.sum()
        if total <= 0:
            break
        j = int(rng.choice(len(uniq), p=d2 / total))
        chosen.append(j)
        d2 = np.minimum(d2, ((uniq - uniq[j]) ** 2).sum(axis=1))
    words = uniq[chosen]
    if len(words) < e:
        # fewer distinct points than codewords: pad with jittered copies
        scale = max(float(np.abs(sub).max()), 1.0) * 1e-3
        extra = words[rng.integers(len(words), size=e - len(words))]
        extra = extra + rng.normal(scale=scale, size=extra.shape)
        words = np.concatenate([words, extra])
    return words


def init_codebooks(x, d_sub: int = 8, E: int = 16, seed: int = 0) -> Codebooks:
    """Seed codebooks from the sub-vectors of ``x`` (k-means++ style)."""
    x = _data(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError("init_codebooks needs a non-empty (n, d) array")
    rng = make_rng(seed, "pq-init")
    words, start = [], 0
    for w in subspace_widths(x.shape[1], d_sub):
        words.append(_seed_one(x[:, start : start + w], E, rng).astype(x.dtype))
        start += w
    return Codebooks(tuple(words), d_sub)


def update_codebooks(cb: Codebooks, x, step: int, period: int = 20) -> Codebooks:
    """One Lloyd step on ``x`` when ``step`` is a multiple of ``period``.

    Each codeword moves to the centroid of the sub-vectors assigned to it.
    Codewords left without members (or duplicating an earlier codeword) are
    re-seeded to the not-yet-used sub-vectors with the largest error.
    Returns ``cb`` itself when no update is due or ``x`` is empty.
    """
    if period < 1:
        raise ValueError(f"period must be >= 1, got {period}")
    x = _data(x)
    if step % period != 0 or x.shape[0] == 0:
        return cb
    _check(x, cb)
    codes = assign_codes(x, cb)
    resid = _residuals(x, cb, codes)
    new_words = []
    for m, ((a, b), words) in enumerate(zip(cb.bounds(), cb.words)):
        sub = x[:, a:b].astype(np.float64)
        counts = np.bincount(codes[:, m], minlength=cb.E)
        sums = np.zeros((cb.E, b - a))
        np.add.at(sums, codes[:, m], sub)
        upd = words.astype(np.float64).copy()
        filled = counts > 0
        upd[filled] = sums[filled] / counts[filled, None]
        stale: list[int] = []
        kept: list[int] = []
        for e in range(cb.E):
            if not filled[e] or any(np.array_equal(upd[e], upd[f]) for f in kept):
                stale.append(e)
            else:
                kept.append(e)
        if stale:
            taken = {upd[e].tobytes() for e in kept}
            for i in np.argsort(-resid[:, m], kind="stable"):
                if not stale:
                    break
                key = sub[i].tobytes()
                if key in taken:
                    continue
                e = stale.pop(0)
                upd[e] = sub[i]
                taken.add(key)
            for k, e in enumerate(stale):
                # every sub-vector is already a codeword
                upd[e] = upd[e] + (k + 1) * 1e-3 * (1.0 + np.abs(upd).max())
        new_words.append(upd.astype(words.dtype))
    return Codebooks(tuple(new_words), cb.d_sub)
