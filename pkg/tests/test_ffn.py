from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import gradcheck
from sparseft.counters import counting
from sparseft.errors import ConfigError, ShapeError
from sparseft.ffn import (
    GroupedFfnWeights,
    RouteDecision,
    bsr_mask_bytes,
    bspmv_ffn,
    dense_ffn,
    load_balance_loss,
    route,
    top_groups,
)
from sparseft.lora import Linear, LoraLinear
from sparseft.tensor import Tensor, softmax, tsum


def weights(d, D, G, G_active, seed=0, gated=True, activation="relu"):
    return GroupedFfnWeights.init(d, D, G, G_active, seed, "t", activation=activation, gated=gated)


def masked_dense_oracle(x, w: GroupedFfnWeights, r: RouteDecision, act=lambda h: np.maximum(h, 0)):
    """Dense FFN per token with inactive groups zeroed and active ones gated."""
    W_I, W_O = w.W_I.weight(), w.W_O.weight()
    gates = np.ones((len(x), w.G)) if r.gates is None else r.gates.data
    mask = r.mask()
    out = np.zeros((len(x), w.d))
    for t in range(len(x)):
        col_scale = np.repeat(np.where(mask[t], gates[t], 0.0), w.block)
        h = act(x[t] @ (W_I * (col_scale != 0)))
        out[t] = (h * col_scale) @ W_O
    return out


def test_all_groups_active_when_G_active_equals_G(rng):
    w = weights(8, 16, 4, 4)
    r = route(Tensor(rng.normal(size=(5, 8))), w)
    assert np.all(np.sort(r.ids, axis=1) == np.arange(4))
    assert r.gates is None


def test_magnitude_ordering_example():
    assert top_groups(np.array([[3.0, -5.0, 1.0, 0.0]]), 2).tolist() == [[1, 0]]


def test_ties_prefer_lower_group():
    assert top_groups(np.array([[1.0, -1.0, 1.0, 0.5]]), 2).tolist() == [[0, 1]]


def test_route_matches_sort_oracle(rng):
    w = weights(8, 32, 8, 3)
    x = rng.normal(size=(30, 8))
    r = route(Tensor(x), w)
    xr = x @ w.W_R.data
    for t in range(30):
        oracle = sorted(range(8), key=lambda g: (-abs(xr[t, g]), g))[:3]
        assert r.ids[t].tolist() == oracle
    np.testing.assert_allclose(r.gate_values(), 1 / (1 + np.exp(-np.take_along_axis(xr, r.ids, 1))), rtol=1e-5)


def test_invalid_active_count():
    with pytest.raises(ConfigError):
        weights(4, 8, 4, 5)


def test_pinned_ids_validated(rng):
    w = weights(4, 8, 4, 2)
    with pytest.raises(ShapeError):
        route(Tensor(rng.normal(size=(2, 4))), w, ids=np.array([[0, 0], [1, 2]]))


def test_full_activation_equals_dense(f64, rng):
    w = weights(8, 32, 4, 4)
    x = Tensor(rng.normal(size=(10, 8)))
    out = bspmv_ffn(x, w, route(x, w))
    np.testing.assert_allclose(out.data, dense_ffn(x, w.W_I, w.W_O).data, atol=1e-6)


def test_single_token_single_block(f64, rng):
    w = weights(6, 12, 3, 1, gated=False)
    x = rng.normal(size=(1, 6))
    r = route(Tensor(x), w, ids=np.array([[0]]))
    out = bspmv_ffn(Tensor(x), w, r).data
    wi, wo = w.W_I.weight().copy(), w.W_O.weight().copy()
    wi[:, 4:] = 0
    wo[4:, :] = 0
    np.testing.assert_allclose(out, np.maximum(x @ wi, 0) @ wo, atol=1e-12)


@pytest.mark.parametrize("gated", [True, False])
@pytest.mark.parametrize("activation", ["relu", "gelu"])
def test_masked_oracle_equivalence(rng, gated, activation):
    w = weights(16, 64, 4, 2, gated=gated, activation=activation)
    x = rng.normal(size=(40, 16)).astype(np.float32)
    r = route(Tensor(x), w)
    if activation == "relu":
        act = lambda h: np.maximum(h, 0)
    else:
        act = lambda h: 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h**3)))
    out = bspmv_ffn(Tensor(x), w, r).data
    np.testing.assert_allclose(out, masked_dense_oracle(x.astype(np.float64), w, r, act), atol=1e-5)


def test_lora_blocks_match_merged_weights(f64, rng):
    w = weights(8, 32, 4, 2)
    w.W_I = LoraLinear.wrap(w.W_I.W, 4, 0, "i")
    w.W_O = LoraLinear.wrap(w.W_O.W, 4, 0, "o")
    w.W_I.C.data[...] = rng.normal(size=w.W_I.C.shape)
    w.W_O.C.data[...] = rng.normal(size=w.W_O.C.shape)
    x = rng.normal(size=(20, 8))
    r = route(Tensor(x), w)
    np.testing.assert_allclose(bspmv_ffn(Tensor(x), w, r).data, masked_dense_oracle(x, w, r), atol=1e-9)


def test_uniform_routing_halves_flops(rng):
    n, d, D = 16, 8, 32
    w = weights(d, D, 4, 2, gated=False)
    x = Tensor(rng.normal(size=(n, d)))
    ids = np.array([[t % 4, (t + 1) % 4] for t in range(n)])
    r = route(x, w, ids=ids)
    with counting() as c:
        bspmv_ffn(x, w, r)
    assert c.flops == n * 2 * (2 * d * (D // 4))
    assert c.flops == 0.5 * 2 * n * d * D


def test_flops_count_gathered_tokens_only(rng):
    w = weights(8, 32, 4, 1, gated=False)
    x = Tensor(rng.normal(size=(10, 8)))
    r = route(x, w, ids=np.zeros((10, 1), dtype=int))
    with counting() as c:
        bspmv_ffn(x, w, r)
    assert c.flops == 10 * 2 * 8 * 8


def test_block_order_does_not_matter(f64, rng):
    w = weights(8, 32, 4, 3)
    x = Tensor(rng.normal(size=(12, 8)))
    r = route(x, w)
    forward = bspmv_ffn(x, w, r).data
    # rebuild the weights with groups permuted and undo the permutation in ids
    perm = np.array([2, 0, 3, 1])
    inv = np.argsort(perm)
    cols = np.concatenate([np.arange(g * 8, (g + 1) * 8) for g in perm])
    w2 = GroupedFfnWeights(
        Linear(Tensor(w.W_I.W.data[:, cols])), Linear(Tensor(w.W_O.W.data[cols])), Tensor(w.W_R.data[:, perm]), 4, 3
    )
    r2 = route(x, w2, ids=inv[r.ids])
    np.testing.assert_allclose(bspmv_ffn(x, w2, r2).data, forward, atol=1e-6)


def test_balance_loss_uniform_is_one(f64):
    xr = Tensor(np.zeros((4, 4)))
    ids = np.array([[0], [1], [2], [3]])
    r = RouteDecision(ids, xr, softmax(xr), None)
    assert load_balance_loss(r).item() == pytest.approx(1.0)


def test_balance_loss_collapsed_routing_approaches_G(f64):
    xr = np.zeros((6, 4))
    xr[:, 2] = 40.0
    r = RouteDecision(np.full((6, 1), 2), Tensor(xr), softmax(Tensor(xr)), None)
    assert load_balance_loss(r).item() == pytest.approx(4.0, abs=1e-6)


def test_balance_loss_direct_sum(f64, rng):
    w = weights(8, 32, 4, 2)
    r = route(Tensor(rng.normal(size=(25, 8))), w)
    p = r.probs.data
    f = np.zeros(4)
    for row in r.ids:
        for g in row:
            f[g] += 1
    f /= 25 * 2
    assert load_balance_loss(r).item() == pytest.approx(4 * float((f * p.mean(0)).sum()), abs=1e-6)


def test_balance_probs_follow_magnitude(f64, rng):
    w = weights(8, 32, 4, 2)
    x = rng.normal(size=(6, 8))
    r = route(Tensor(x), w)
    mag = np.abs(x @ w.W_R.data)
    want = np.exp(mag) / np.exp(mag).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(r.probs.data, want, atol=1e-12)
    # the most probable group is always among the selected ones
    assert all(np.argmax(want[t]) in r.ids[t] for t in range(6))


def test_ffn_gradients_with_fixed_routing(f64, rng):
    w = weights(6, 24, 4, 2)
    w.W_I.W.requires_grad = True
    w.W_O.W.requires_grad = True
    x = Tensor(rng.normal(size=(9, 6)))
    ids = route(x, w).ids
    target = rng.normal(size=(9, 6))

    def f():
        r = route(x, w, ids=ids)
        return tsum(bspmv_ffn(x, w, r) * Tensor(target)) + load_balance_loss(r) * 0.3

    assert gradcheck(f, [w.W_I.W, w.W_O.W, w.W_R], probes=60) < 1e-6


def test_balance_loss_gradient(f64, rng):
    w = weights(6, 24, 4, 2)
    x = Tensor(rng.normal(size=(9, 6)))
    ids = route(x, w).ids
    f = lambda: load_balance_loss(route(x, w, ids=ids))
    assert gradcheck(f, [w.W_R], probes=50) < 1e-6


def test_dense_ffn_examples(f64, rng):
    assert np.all(dense_ffn(Tensor(np.zeros((3, 4))), Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(8, 4)))).data == 0)
    x = np.abs(rng.normal(size=(3, 4)))
    np.testing.assert_allclose(dense_ffn(Tensor(x), Tensor(np.eye(4)), Tensor(np.eye(4))).data, x)
    wi, wo = rng.normal(size=(4, 8)), rng.normal(size=(8, 4))
    x = rng.normal(size=(5, 4))
    np.testing.assert_allclose(dense_ffn(Tensor(x), Tensor(wi), Tensor(wo)).data, np.maximum(x @ wi, 0) @ wo, atol=1e-6)


def test_bsr_mask_bytes_exceeds_memory():
    n = bsr_mask_bytes(16, 512, 2048, 8192, 4)
    assert n == 16 * 512 * (2 * 2048 * 8192 + 4 * 4)
    assert n >= 1.9e11


def test_shape_checks(rng):
    w = weights(4, 8, 2, 1)
    with pytest.raises(ShapeError):
        route(Tensor(np.ones((2, 5))), w)
    r = route(Tensor(np.ones((2, 4))), w)
    with pytest.raises(ShapeError):
        bspmv_ffn(Tensor(np.ones((3, 4))), w, r)


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 20),
    G=st.sampled_from([1, 2, 4, 8]),
    frac=st.floats(0.01, 1.0),
    seed=st.integers(0, 2**16),
)
def test_routing_invariants(n, G, frac, seed):
    G_active = max(1, round(frac * G))
    w = GroupedFfnWeights.init(4, 8 * G, G, G_active, seed, "prop")
    x = np.random.default_rng(seed).normal(size=(n, 4))
    r = route(Tensor(x), w)
    mag = np.abs(x @ w.W_R.data)
    assert r.ids.shape == (n, G_active)
    for t in range(n):
        assert len(set(r.ids[t].tolist())) == G_active
        rest = np.setdiff1d(np.arange(G), r.ids[t])
        if len(rest):
            assert mag[t, r.ids[t]].min() >= mag[t, rest].max() - 1e-6
    assert r.counts().sum() == n * G_active
