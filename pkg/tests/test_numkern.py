import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lfvit import numkern as nk
from lfvit.errors import DimensionError


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(float(a[i][p]) * float(b[p][j]) for p in range(k)) for j in range(n)] for i in range(m)]


def test_matmul_identity():
    out = nk.matmul([[1, 0], [0, 1]], [[3, 4], [5, 6]])
    assert out.tolist() == [[3, 4], [5, 6]]


def test_matmul_row_by_column():
    assert nk.matmul([[1, 2]], [[3], [4]]).tolist() == [[11]]


def test_matmul_matches_triple_loop(rng):
    a = rng.normal(size=(7, 5)).astype(np.float32)
    b = rng.normal(size=(5, 3)).astype(np.float32)
    np.testing.assert_allclose(nk.matmul(a, b), naive_matmul(a, b), atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nk.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative(rng):
    a, b, c = (rng.normal(size=s).astype(np.float32) for s in ((4, 5), (5, 6), (6, 3)))
    np.testing.assert_allclose(nk.matmul(nk.matmul(a, b), c), nk.matmul(a, nk.matmul(b, c)), atol=1e-4)


def test_softmax_uniform():
    np.testing.assert_allclose(nk.softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-7)


def test_softmax_large_inputs_do_not_overflow():
    out = nk.softmax([1000.0, 1000.0])
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.5, 0.5])


def test_softmax_direct_formula():
    denom = sum(math.exp(v) for v in (1, 2, 3))
    expected = [math.exp(v) / denom for v in (1, 2, 3)]
    np.testing.assert_allclose(nk.softmax([1.0, 2.0, 3.0]), expected, atol=1e-7)


@given(arrays(np.float32, (3, 6), elements=st.floats(-50, 50, width=32)),
       st.floats(-100, 100, width=32))
def test_softmax_shift_invariant_and_normalised(x, shift):
    a = nk.softmax(x)
    assert np.all(a >= 0)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)
    shifted = x + np.float32(shift)  # rounds in float32, so the oracle sees the rounded input
    ref = np.exp(shifted.astype(np.float64) - shifted.max(axis=-1, keepdims=True))
    ref /= ref.sum(axis=-1, keepdims=True)
    np.testing.assert_allclose(nk.softmax(shifted), ref, atol=1e-6)


def test_layer_norm_constant_row_is_zero():
    out = nk.layer_norm(np.full((1, 5), 3.0), np.ones(5), np.zeros(5))
    np.testing.assert_array_equal(out, np.zeros((1, 5)))


def test_layer_norm_two_points():
    np.testing.assert_allclose(nk.layer_norm([[1.0, 3.0]], np.ones(2), np.zeros(2)), [[-1, 1]], atol=1e-3)


def test_layer_norm_row_statistics(rng):
    out = nk.layer_norm(rng.normal(2.0, 3.0, size=(4, 8)), np.ones(8), np.zeros(8)).astype(np.float64)
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-5)


@settings(max_examples=50)
@given(arrays(np.float32, (2, 8), elements=st.floats(-10, 10, width=32)),
       st.floats(0.5, 4.0), st.floats(-5, 5))
def test_layer_norm_ignores_input_affine(x, scale, shift):
    x = x + np.linspace(0, 1, 8, dtype=np.float32)  # keep rows away from zero variance
    g, b = np.full(8, 2.0), np.full(8, 0.5)
    np.testing.assert_allclose(nk.layer_norm(x * scale + shift, g, b), nk.layer_norm(x, g, b), atol=1e-3)


def test_gelu_reference_points():
    assert nk.gelu([0.0])[0] == 0.0
    assert abs(nk.gelu([1.0])[0] - 0.5 * (1 + math.erf(1 / math.sqrt(2)))) < 1e-6
    assert abs(nk.gelu([1.0])[0] - 0.8413) < 1e-4
    assert abs(nk.gelu([20.0])[0] - 20.0) < 1e-4


def test_gelu_monotone():
    x = np.linspace(-0.7, 10, 2001, dtype=np.float32)  # nondecreasing right of its minimum
    assert np.all(np.diff(nk.gelu(x)) >= 0)


def test_kernels_leave_inputs_untouched(rng):
    x = rng.normal(size=(3, 4)).astype(np.float32)
    before = x.copy()
    nk.softmax(x), nk.layer_norm(x, np.ones(4), np.zeros(4)), nk.gelu(x)
    np.testing.assert_array_equal(x, before)
