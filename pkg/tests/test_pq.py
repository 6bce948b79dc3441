from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sparseft.errors import ShapeError
from sparseft.pq import (
    Codebooks,
    assign_codes,
    init_codebooks,
    quantization_error,
    subspace_widths,
    update_codebooks,
)


def worked_codebooks() -> Codebooks:
    """Two 2-d codebooks of four words; word 1 of the first and word 2 of the
    second are the pair the worked example reconstructs."""
    c1 = np.array([[1.0, 1.0], [0.3, 0.6], [-0.5, 0.9], [0.0, -1.0]])
    c2 = np.array([[0.5, 0.5], [0.2, -0.7], [-1.0, 0.0], [1.0, 1.0]])
    return Codebooks((c1, c2), d_sub=2)


def scan_oracle(x, cb):
    codes = np.zeros((len(x), cb.M), dtype=int)
    for i, row in enumerate(x):
        for m, ((a, b), words) in enumerate(zip(cb.bounds(), cb.words)):
            best, best_d = 0, np.inf
            for e, w in enumerate(words):
                d = float(((row[a:b] - w) ** 2).sum())
                if d < best_d:
                    best, best_d = e, d
            codes[i, m] = best
    return codes


def test_subspace_widths_remainder_goes_last():
    assert subspace_widths(16, 8) == [8, 8]
    assert subspace_widths(20, 8) == [8, 8, 4]
    assert subspace_widths(3, 8) == [3]


def test_worked_example_codes_and_reconstruction():
    cb = worked_codebooks()
    x = np.array([[0.3, 0.6, -1.0, 0.0]])
    codes = assign_codes(x, cb)
    assert codes.tolist() == [[1, 2]]
    np.testing.assert_allclose(cb.reconstruct(codes), [[0.3, 0.6, -1.0, 0.0]])


def test_single_codeword_gives_zero_codes(rng):
    cb = Codebooks((rng.normal(size=(1, 4)), rng.normal(size=(1, 4))), d_sub=4)
    assert np.all(assign_codes(rng.normal(size=(10, 8)), cb) == 0)


def test_assign_matches_distance_scan(rng):
    cb = Codebooks((rng.normal(size=(4, 3)), rng.normal(size=(4, 3))), d_sub=3)
    x = rng.normal(size=(40, 6))
    np.testing.assert_array_equal(assign_codes(x, cb), scan_oracle(x, cb))


def test_assign_ties_go_to_lowest_index():
    words = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    cb = Codebooks((words,), d_sub=2)
    assert assign_codes(np.array([[0.0, 0.0], [1.0, 0.0]]), cb).ravel().tolist() == [0, 0]


def test_assign_rejects_wrong_width():
    with pytest.raises(ShapeError):
        assign_codes(np.zeros((2, 5)), worked_codebooks())


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 20), st.just(6)), elements=st.floats(-3, 3)))
def test_assignment_is_optimal(x):
    cb = Codebooks(tuple(np.linspace(-2, 2, 15).reshape(5, 3) + m for m in range(2)), d_sub=3)
    codes = assign_codes(x, cb)
    for m, ((a, b), words) in enumerate(zip(cb.bounds(), cb.words)):
        d = ((x[:, None, a:b] - words[None]) ** 2).sum(-1)
        chosen = d[np.arange(len(x)), codes[:, m]]
        assert np.all(chosen <= d.min(axis=1) + 1e-12)


def test_quantization_error_examples():
    cb = worked_codebooks()
    on = np.array([[0.3, 0.6, -1.0, 0.0], [1.0, 1.0, 0.5, 0.5]])
    assert quantization_error(on, cb, assign_codes(on, cb)) == 0.0
    off = on.copy()
    off[0, 0] += 1.0
    codes = assign_codes(on, cb)
    assert quantization_error(off, cb, codes) == pytest.approx(1.0 / 2)


def test_quantization_error_matches_direct_sum(rng):
    cb = Codebooks((rng.normal(size=(4, 3)), rng.normal(size=(4, 2))), d_sub=3)
    x = rng.normal(size=(25, 5))
    codes = assign_codes(x, cb)
    direct = np.mean([((x[i] - cb.reconstruct(codes[i : i + 1])[0]) ** 2).sum() for i in range(25)])
    assert quantization_error(x, cb, codes) == pytest.approx(direct, abs=1e-6)


def test_update_skipped_off_period(rng):
    cb = init_codebooks(rng.normal(size=(50, 8)), d_sub=4, E=4)
    assert update_codebooks(cb, rng.normal(size=(50, 8)), step=1, period=20) is cb


def test_update_with_empty_batch_is_noop(rng):
    cb = init_codebooks(rng.normal(size=(50, 8)), d_sub=4, E=4)
    assert update_codebooks(cb, np.zeros((0, 8)), step=0) is cb


def test_update_two_clusters_converge():
    x = np.array([[1.0, 2.0]] * 5 + [[-3.0, 0.5]] * 7)
    cb = Codebooks((np.array([[0.9, 2.2], [-2.0, 0.0]]),), d_sub=2)
    new = update_codebooks(cb, x, step=0, period=20)
    np.testing.assert_allclose(new.words[0], [[1.0, 2.0], [-3.0, 0.5]])


def test_update_reseeds_empty_codeword_to_worst_vector():
    x = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0]])
    cb = Codebooks((np.array([[0.0, 0.0], [100.0, 100.0]]),), d_sub=2)
    new = update_codebooks(cb, x, step=0)
    # the far codeword had no members; it moves onto the worst-served point
    np.testing.assert_allclose(new.words[0][1], [5.0, 5.0])


def test_update_leaves_no_duplicate_codewords():
    x = np.array([[1.0, 1.0]] * 4 + [[2.0, 2.0]] * 4)
    cb = Codebooks((np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [3.0, 3.0]]),), d_sub=2)
    new = update_codebooks(cb, x, step=0).words[0]
    assert len(np.unique(new, axis=0)) == len(new)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_update_never_increases_error(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(int(rng.integers(1, 60)), 6)) * rng.uniform(0.1, 3)
    cb = init_codebooks(rng.normal(size=(30, 6)), d_sub=4, E=int(rng.integers(1, 9)), seed=seed)
    before = quantization_error(x, cb, assign_codes(x, cb))
    new = update_codebooks(cb, x, step=0)
    after = quantization_error(x, new, assign_codes(x, new))
    assert after <= before + 1e-9


def test_init_is_deterministic_and_distinct(rng):
    x = rng.normal(size=(100, 16))
    a, b = init_codebooks(x, 8, 16, seed=3), init_codebooks(x, 8, 16, seed=3)
    for wa, wb in zip(a.words, b.words):
        np.testing.assert_array_equal(wa, wb)
        assert len(np.unique(wa, axis=0)) == 16


def test_init_with_few_points_pads_distinct_words():
    cb = init_codebooks(np.ones((3, 4)), d_sub=2, E=4)
    for w in cb.words:
        assert len(np.unique(w, axis=0)) == 4


def test_blob_round_trip(rng):
    cb = Codebooks((rng.normal(size=(16, 8)), rng.normal(size=(16, 4))), d_sub=8)
    blob = cb.to_bytes()
    assert blob[:12] == np.array([2, 16, 8], dtype="<i4").tobytes()
    back = Codebooks.from_bytes(blob)
    assert back.M == 2 and back.E == 16 and back.dim == 12
    for w, v in zip(cb.words, back.words):
        np.testing.assert_array_equal(w.astype(np.float32), v)


def test_codebooks_reject_bad_widths(rng):
    with pytest.raises(ShapeError):
        Codebooks((rng.normal(size=(4, 2)), rng.normal(size=(4, 3))), d_sub=2)
