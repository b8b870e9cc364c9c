import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from deepreg.errors import DegenerateGeometry, InvalidArgument
from deepreg.shapes import (
    LandmarkLayout, flip_shape, ibug68_layout, interpupil_distance, mean_shape, normalized_error,
)

coords = st.floats(-1e3, 1e3, allow_nan=False)


def shapes(P):
    return hnp.arrays(np.float64, 2 * P, elements=coords)


def eq10_scalar(pred, truth, d):
    # plain-python evaluation of the per-sample metric
    P = len(pred) // 2
    total = 0.0
    for p in range(P):
        total += math.sqrt((pred[2 * p] - truth[2 * p]) ** 2 + (pred[2 * p + 1] - truth[2 * p + 1]) ** 2)
    return total / P / d


def test_identical_shapes_have_zero_error():
    s = np.array([1.0, 2.0, 3.0, 4.0])
    assert normalized_error(s, s, 7.3) == 0.0


def test_three_four_five():
    assert normalized_error([3.0, 4.0], [0.0, 0.0], 5.0) == pytest.approx(1.0)


def test_two_landmarks_hand_value():
    truth = np.array([10.0, 10.0, 20.0, 5.0])
    pred = truth + np.array([1.0, 0.0, 0.0, 2.0])
    assert eq10_scalar(pred, truth, 4.0) == pytest.approx(0.375)
    assert normalized_error(pred, truth, 4.0) == pytest.approx(0.375)


@pytest.mark.parametrize("d", [0.0, -1.0])
def test_nonpositive_distance_rejected(d):
    with pytest.raises(InvalidArgument):
        normalized_error([0.0, 0.0], [1.0, 1.0], d)


def test_length_mismatch_rejected():
    with pytest.raises(InvalidArgument):
        normalized_error([0.0, 0.0], [1.0, 1.0, 2.0, 2.0], 1.0)


@given(st.integers(1, 6).flatmap(lambda P: st.tuples(shapes(P), shapes(P))),
       st.floats(0.01, 100))
def test_error_properties(pair, d):
    pred, truth = pair
    e = normalized_error(pred, truth, d)
    assert e >= 0
    assert (e == 0) == bool(np.array_equal(pred, truth))
    assert normalized_error(pred, truth, 2 * d) == e / 2
    assert e == pytest.approx(eq10_scalar(pred, truth, d), rel=1e-12, abs=1e-12)


def layout2():
    return LandmarkLayout(2, (1, 0), (0,), (1,))


def test_interpupil_examples():
    lay = LandmarkLayout(4, (0, 1, 2, 3), (0, 1), (2, 3))
    assert interpupil_distance(np.array([0, 0, 0, 0, 6, 8, 6, 8.0]), lay) == pytest.approx(10.0)
    assert interpupil_distance(np.array([1, 1, 4, 5.0]), layout2()) == pytest.approx(5.0)
    # mean then distance: (1,0) to (11,0)
    assert interpupil_distance(np.array([0, 0, 2, 0, 10, 0, 12, 0.0]), lay) == pytest.approx(10.0)


def test_coincident_eyes_are_degenerate():
    with pytest.raises(DegenerateGeometry):
        interpupil_distance(np.array([3.0, 3.0, 3.0, 3.0]), layout2())


def test_mean_shape_examples():
    s = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(mean_shape([s]), s)
    np.testing.assert_array_equal(mean_shape([s, -s]), np.zeros(4))
    m = mean_shape([np.array([1.0, 0]), np.array([2.0, 0]), np.array([6.0, 0])])
    assert m[0] == 3.0
    with pytest.raises(InvalidArgument):
        mean_shape([])


@given(shapes(3), st.integers(1, 20))
def test_mean_of_copies(s, n):
    np.testing.assert_allclose(mean_shape([s] * n), s, rtol=1e-12, atol=1e-9)


def test_flip_examples():
    lay1 = LandmarkLayout(2, (0, 1), (0,), (1,))
    s = np.array([49.5, 3.0, 10.0, 1.0])
    assert flip_shape(s, 100, lay1)[0] == 49.5
    out = flip_shape(np.array([10.0, 5.0, 20.0, 7.0]), 100, layout2())
    np.testing.assert_array_equal(out, [79.0, 7.0, 89.0, 5.0])


@given(shapes(68), st.integers(1, 500))
def test_flip_involution_ibug(s, width):
    lay = ibug68_layout()
    np.testing.assert_allclose(flip_shape(flip_shape(s, width, lay), width, lay), s, atol=1e-9)


@pytest.mark.parametrize("kwargs", [
    dict(P=2, flip_permutation=(1, 1), left_eye=(0,), right_eye=(1,)),
    dict(P=3, flip_permutation=(1, 2, 0), left_eye=(0,), right_eye=(1,)),
    dict(P=2, flip_permutation=(1, 0), left_eye=(), right_eye=(1,)),
    dict(P=2, flip_permutation=(1, 0), left_eye=(0, 1), right_eye=(1,)),
])
def test_invalid_layouts(kwargs):
    with pytest.raises(InvalidArgument):
        LandmarkLayout(**kwargs)
