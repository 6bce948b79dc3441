from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import gradcheck
from sparseft.counters import counting
from sparseft.errors import ShapeError
from sparseft.lora import LoraLinear, load_adapters, lora_forward, merge, save_adapters, trainable_count
from sparseft.tensor import Tensor, backward, tsum


def layer(rng, d=6, h=5, r=3, zero_c=False):
    W = Tensor(rng.normal(size=(d, h)))
    lyr = LoraLinear.wrap(W, r, 0, "x")
    if not zero_c:
        lyr.C.data[...] = rng.normal(size=(r, h))
    return lyr


def test_zero_c_reproduces_base(f64, rng):
    lyr = layer(rng, zero_c=True)
    x = rng.normal(size=(4, 6))
    np.testing.assert_array_equal(lora_forward(Tensor(x), lyr).data, Tensor(x).data @ lyr.W.data)


def test_zero_base_is_two_step_product(f64, rng):
    lyr = LoraLinear(Tensor(np.zeros((6, 5))), Tensor(rng.normal(size=(6, 3))), Tensor(rng.normal(size=(3, 5))))
    x = rng.normal(size=(4, 6))
    np.testing.assert_allclose(lora_forward(Tensor(x), lyr).data, (x @ lyr.B.data) @ lyr.C.data)


def test_identity_factor(f64, rng):
    c = rng.normal(size=(4, 4))
    W = rng.normal(size=(4, 4))
    lyr = LoraLinear(Tensor(W), Tensor(np.eye(4)), Tensor(c))
    x = rng.normal(size=(3, 4))
    np.testing.assert_allclose(lora_forward(Tensor(x), lyr).data, x @ (W + c))


def test_merge_examples(f64, rng):
    lyr = layer(rng)
    W = lyr.W.data.copy()
    lyr.B.data[...] = 0
    np.testing.assert_array_equal(merge(lyr), W)
    lyr = layer(rng, zero_c=True)
    np.testing.assert_array_equal(merge(lyr), lyr.W.data)


def test_merge_matches_factored_forward(rng):
    lyr = layer(rng, d=32, h=24, r=16)
    x = rng.normal(size=(50, 32)).astype(np.float32)
    np.testing.assert_allclose(Tensor(x).data @ merge(lyr), lora_forward(Tensor(x), lyr).data, atol=1e-5)


def test_forward_flops(rng):
    lyr = layer(rng, d=6, h=5, r=3)
    with counting() as c:
        lora_forward(Tensor(rng.normal(size=(4, 6))), lyr)
    assert c.flops == 4 * 6 * 5 + 4 * 3 * (6 + 5)


def test_base_weight_is_frozen(f64, rng):
    lyr = layer(rng)
    before = lyr.W.data.copy()
    backward(tsum(lora_forward(Tensor(rng.normal(size=(4, 6))), lyr)))
    assert lyr.W.grad is None
    assert lyr.B.grad is not None and lyr.C.grad is not None
    np.testing.assert_array_equal(lyr.W.data, before)
    assert lyr.parameters() == [lyr.B, lyr.C]


def test_gradients(f64, rng):
    lyr = layer(rng)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    t = rng.normal(size=(4, 5))
    f = lambda: tsum(lora_forward(x, lyr) * Tensor(t) * lora_forward(x, lyr))
    assert gradcheck(f, [x, lyr.B, lyr.C], probes=60) < 1e-6


@pytest.mark.parametrize("d,h,r", [(2048, 2048, 16), (2048, 8192, 16), (64, 32, 4)])
def test_trainable_count(d, h, r):
    assert trainable_count(d, h, r) == r * (d + h)
    assert trainable_count(d, h, r) < d * h


def test_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        lora_forward(Tensor(np.ones((2, 7))), layer(rng))
    with pytest.raises(ShapeError):
        LoraLinear(Tensor(np.ones((4, 4))), Tensor(np.ones((3, 2))), Tensor(np.ones((2, 4))))


def test_adapter_checkpoint_round_trip(tmp_path, rng):
    a, b = layer(rng), layer(rng)
    path = tmp_path / "adapters.npz"
    save_adapters(path, {"q": a, "v": b}, extra={"codebooks": np.arange(3)})
    a2, b2 = layer(rng, zero_c=True), layer(rng, zero_c=True)
    rest = load_adapters(path, {"q": a2, "v": b2})
    np.testing.assert_array_equal(a2.C.data, a.C.data)
    np.testing.assert_array_equal(b2.B.data, b.B.data)
    assert rest["codebooks"].tolist() == [0, 1, 2]
    with np.load(path) as z:
        assert sorted(z.files) == ["codebooks", "q.B", "q.C", "v.B", "v.C"]


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 12), h=st.integers(1, 12), r=st.integers(1, 6), seed=st.integers(0, 2**16))
def test_merge_equals_factored_forward(d, h, r, seed):
    rng = np.random.default_rng(seed)
    lyr = LoraLinear(Tensor(rng.normal(size=(d, h))), Tensor(rng.normal(size=(d, r))), Tensor(rng.normal(size=(r, h))))
    x = rng.normal(size=(3, d)).astype(np.float32)
    np.testing.assert_allclose(x @ merge(lyr), lora_forward(Tensor(x), lyr).data, rtol=1e-4, atol=1e-4)
