import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kvquant.scaler import compute_scales_par, compute_scales_ref
from kvquant.tensor import Fp32Matrix, RngSpec, make_fp32

from conftest import oracle_scales

f32 = np.float32

matrices = hnp.arrays(
    np.float32,
    hnp.array_shapes(min_dims=2, max_dims=2, max_side=40),
    elements=st.floats(-1e6, 1e6, width=32, allow_subnormal=False),
)


def test_single_column():
    assert compute_scales_ref(Fp32Matrix([[1.0], [-0.5]])).scales.tolist() == [f32(1.0) / f32(127)]


def test_zero_matrix():
    assert compute_scales_ref(make_fp32(2, 2)).scales.tolist() == [0.0, 0.0]


def test_hand_traced():
    s = compute_scales_ref(Fp32Matrix([[0.25, -0.75], [0.5, 0.6]])).scales
    assert s.tolist() == [f32(0.5) / f32(127), f32(0.75) / f32(127)]


def test_parallel_workers_one():
    K = make_fp32(50, 9, RngSpec(1))
    assert compute_scales_par(K, 1) == compute_scales_ref(K)


def test_parallel_large_bit_exact():
    K = make_fp32(1024, 256, RngSpec(7))
    ref = compute_scales_ref(K)
    par = compute_scales_par(K, 8)
    assert np.array_equal(ref.scales.view(np.uint32), par.scales.view(np.uint32))
    assert np.array_equal(ref.scales, oracle_scales(K.data))


def test_parallel_more_workers_than_columns():
    assert compute_scales_par(Fp32Matrix([[-3.0]]), 16).scales.tolist() == [f32(3.0) / f32(127)]


@pytest.mark.parametrize("workers", [1, 2, 3, 5, 8, 64])
def test_parallel_any_worker_count(workers):
    K = make_fp32(77, 13, RngSpec(workers))
    assert compute_scales_par(K, workers) == compute_scales_ref(K)


def test_invalid_workers():
    with pytest.raises(ValueError):
        compute_scales_par(make_fp32(2, 2), 0)


@settings(max_examples=80, deadline=None)
@given(matrices)
def test_nonnegative_and_zero_iff_zero_column(arr):
    s = compute_scales_ref(Fp32Matrix(arr)).scales
    assert (s >= 0).all()
    zero_cols = ~np.any(arr != 0, axis=0)
    assert np.array_equal(s == 0, zero_cols)


@settings(max_examples=80, deadline=None)
@given(matrices)
def test_tightness(arr):
    s = compute_scales_ref(Fp32Matrix(arr)).scales
    mx = np.abs(arr).max(axis=0)
    nz = s > 0
    ratio = mx[nz] / s[nz]
    assert ((ratio >= 126.999) & (ratio <= 127.001)).all()


@settings(max_examples=60, deadline=None)
@given(matrices, st.randoms(use_true_random=False))
def test_permutations(arr, rnd):
    s = compute_scales_ref(Fp32Matrix(arr)).scales
    cols = list(range(arr.shape[1]))
    rows = list(range(arr.shape[0]))
    rnd.shuffle(cols)
    rnd.shuffle(rows)
    assert np.array_equal(compute_scales_ref(Fp32Matrix(arr[:, cols])).scales, s[cols])
    assert np.array_equal(compute_scales_ref(Fp32Matrix(arr[rows])).scales, s)


@settings(max_examples=60, deadline=None)
@given(matrices, st.integers(1, 12))
def test_parallel_equals_reference(arr, workers):
    K = Fp32Matrix(arr)
    assert compute_scales_par(K, workers) == compute_scales_ref(K)
    assert np.array_equal(compute_scales_ref(K).scales, oracle_scales(arr))
