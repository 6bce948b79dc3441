"""Shared oracles for the test suite."""
from __future__ import annotations

import numpy as np

from sparseft.tensor import Tensor, backward, no_grad


def numeric_grad(f, param: Tensor, index: tuple, eps: float = 1e-5) -> float:
    old = param.data[index]
    with no_grad():
        param.data[index] = old + eps
        hi = f().item()
        param.data[index] = old - eps
        lo = f().item()
    param.data[index] = old
    return (hi - lo) / (2 * eps)


def gradcheck(f, params: list[Tensor], probes: int = 50, seed: int = 0, eps: float = 1e-5) -> float:
    """Largest analytic-vs-central-difference error over ``probes`` random entries.

    The error is scaled by the largest numeric gradient seen, so entries whose
    true gradient is zero cannot blow the ratio up.
    """
    for p in params:
        p.grad = None
    backward(f())
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    for k in range(probes):
        p = params[k % len(params)]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        g = 0.0 if p.grad is None else float(p.grad[idx])
        analytic.append(g)
        numeric.append(numeric_grad(f, p, idx, eps))
    a, n = np.array(analytic), np.array(numeric)
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-12))


def rand(rng, *shape, grad: bool = True) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=grad)


def dense_masked_attention(q, k, v, mask):
    """Softmax of ``q k^T`` with entries outside ``mask`` at -inf, then ``@ v``."""
    s = q @ k.T
    s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return (e / e.sum(axis=1, keepdims=True)) @ v
