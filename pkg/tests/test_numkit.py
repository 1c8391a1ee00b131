import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tacofl import numkit
from tacofl.numkit import DimensionError, NonFiniteError

finite = st.floats(-1e6, 1e6, allow_nan=False)
vec = arrays(np.float64, st.integers(1, 20), elements=finite)


@pytest.mark.parametrize("a,b,want", [([1, 0], [0, 1], 0.0), ([1, 2], [3, 4], 11.0),
                                      ([2, 0], [1, 0.5], 2.0)])
def test_dot(a, b, want):
    assert numkit.dot(a, b) == want


@pytest.mark.parametrize("a,want", [([0, 0, 0], 0.0), ([3, 4], 5.0), ([1, 1], math.sqrt(2))])
def test_norm2(a, want):
    assert numkit.norm2(a) == pytest.approx(want, abs=1e-15)


@pytest.mark.parametrize("a,b,want", [([1, 0], [1, 0], 1.0), ([1, 0], [0, 1], 0.0),
                                      ([1, 0], [0, 0], 0.0)])
def test_cosine_examples(a, b, want):
    assert numkit.cosine(a, b) == want


def test_cosine_tiny_vector_counts_as_zero():
    assert numkit.cosine([1e-13, 0], [1, 0]) == 0.0


@pytest.mark.parametrize("y,alpha,x,want", [([1, 1], 0, [9, 9], [1, 1]),
                                            ([0, 0], 2, [1, -1], [2, -2]),
                                            ([1, 0], -0.5, [2, 2], [0, -1])])
def test_axpy(y, alpha, x, want):
    np.testing.assert_array_equal(numkit.axpy(np.array(y, float), alpha, np.array(x, float)), want)


def test_axpy_does_not_mutate():
    y = np.array([1.0, 2.0])
    numkit.axpy(y, 3.0, np.ones(2))
    np.testing.assert_array_equal(y, [1.0, 2.0])


@pytest.mark.parametrize("fn", [numkit.dot, numkit.cosine])
def test_length_mismatch(fn):
    with pytest.raises(DimensionError):
        fn([1, 2], [1, 2, 3])


def test_axpy_length_mismatch_and_overflow():
    with pytest.raises(DimensionError):
        numkit.axpy(np.ones(2), 1.0, np.ones(3))
    with pytest.raises(NonFiniteError):
        numkit.axpy(np.array([1e308]), 10.0, np.array([1e308]))


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        numkit.check_finite(np.array([0.0, np.nan]))


def test_sequential_summation():
    # naive left-to-right accumulation, not pairwise
    v = np.array([1e16, 1.0, -1e16, 1.0])
    assert numkit.dot(v, np.ones(4)) == ((1e16 + 1.0) - 1e16) + 1.0


@given(vec)
def test_cosine_self_is_one(a):
    if numkit.norm2(a) >= numkit.EPS_ZERO:
        assert numkit.cosine(a, a) == pytest.approx(1.0, abs=1e-12)


@given(vec, st.floats(1e-3, 1e3))
def test_cosine_scale_invariance(a, s):
    if numkit.norm2(a) >= 1e-6:
        assert numkit.cosine(a, s * a) == pytest.approx(1.0, abs=1e-12)
        assert numkit.cosine(a, -s * a) == pytest.approx(-1.0, abs=1e-12)


@given(st.integers(1, 20).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite))))
def test_cosine_bounded(pair):
    a, b = pair
    assert -1.0 <= numkit.cosine(a, b) <= 1.0


@given(vec)
def test_self_difference_is_zero(a):
    assert numkit.norm2(numkit.axpy(a, -1.0, a)) == 0.0
