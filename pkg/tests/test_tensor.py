import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from app.core.tensor import (
    conv2d,
    conv2d_backward,
    finite_diff_grad,
    relative_error,
    rotate90,
    softmax,
)


def naive_conv2d(x, w, padding):
    c_in, h, wd = x.shape
    c_out, _, k_h, k_w = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((c_out, h + 2 * padding - k_h + 1, wd + 2 * padding - k_w + 1))
    for o in range(c_out):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                for c in range(c_in):
                    for u in range(k_h):
                        for v in range(k_w):
                            out[o, i, j] += xp[c, i + u, j + v] * w[o, c, u, v]
    return out


def test_conv2d_sums_ones():
    out = conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 9.0


def test_conv2d_scalar():
    assert conv2d(np.array([[[5.0]]]), np.array([[[[2.0]]]]))[0, 0, 0] == 10.0


@pytest.mark.parametrize("c_in", [1, 2])
@pytest.mark.parametrize("size", [3, 5, 8])
@pytest.mark.parametrize("kernel", [1, 3])
@pytest.mark.parametrize("padding", [0, 1, 2])
def test_conv2d_matches_nested_loops(rng, c_in, size, kernel, padding):
    x = rng.normal(size=(c_in, size, size))
    w = rng.normal(size=(2, c_in, kernel, kernel))
    np.testing.assert_allclose(conv2d(x, w, padding), naive_conv2d(x, w, padding), atol=1e-12)


def test_conv2d_random_four_by_four(rng):
    x = rng.normal(size=(1, 4, 4))
    w = rng.normal(size=(2, 1, 3, 3))
    out = conv2d(x, w, padding=1)
    assert out.shape == (2, 4, 4)
    np.testing.assert_allclose(out, naive_conv2d(x, w, 1), atol=1e-12)


def test_conv2d_batched_matches_per_sample(rng):
    x = rng.normal(size=(3, 2, 6, 6))
    w = rng.normal(size=(4, 2, 3, 3))
    batched = conv2d(x, w, 1)
    for b in range(3):
        np.testing.assert_allclose(batched[b], conv2d(x[b], w, 1), atol=1e-12)


@pytest.mark.parametrize(
    "x_shape, w_shape, padding, match",
    [
        ((1, 4, 4), (1, 1, 2, 2), 0, "odd"),
        ((2, 4, 4), (1, 1, 3, 3), 0, "Channel mismatch"),
        ((1, 0, 0), (1, 1, 1, 1), 0, "empty"),
        ((1, 4, 4), (1, 1, 3, 3), -1, "Padding"),
        ((1, 2, 2), (1, 1, 5, 5), 0, "larger"),
    ],
)
def test_conv2d_rejects_bad_shapes(x_shape, w_shape, padding, match):
    with pytest.raises(ValueError, match=match):
        conv2d(np.zeros(x_shape), np.zeros(w_shape), padding)


@pytest.mark.parametrize("padding", [0, 1])
def test_conv2d_backward_matches_finite_differences(rng, padding):
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    upstream = rng.normal(size=conv2d(x, w, padding).shape)
    grad_x, grad_w = conv2d_backward(x, w, padding, upstream)

    numeric_x = finite_diff_grad(lambda v: float((conv2d(v, w, padding) * upstream).sum()), x)
    numeric_w = finite_diff_grad(lambda v: float((conv2d(x, v, padding) * upstream).sum()), w)
    assert relative_error(grad_x, numeric_x) < 1e-4
    assert relative_error(grad_w, numeric_w) < 1e-4


def test_rotate90_example():
    np.testing.assert_array_equal(rotate90(np.array([[1, 2], [3, 4]]), 1), [[2, 4], [1, 3]])


def test_rotate90_identities(rng):
    plane = rng.normal(size=(5, 5))
    np.testing.assert_array_equal(rotate90(plane, 0), plane)
    np.testing.assert_array_equal(rotate90(plane, 4), plane)
    np.testing.assert_array_equal(rotate90(plane, 2), rotate90(rotate90(plane, 1), 1))
    np.testing.assert_array_equal(np.sort(rotate90(plane, 1), axis=None), np.sort(plane, axis=None))


def test_rotate90_rejects_non_square():
    with pytest.raises(ValueError, match="square"):
        rotate90(np.zeros((2, 3)))


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(4)), [0.25] * 4, atol=1e-15)
    np.testing.assert_allclose(softmax(np.array([3.0, 3.0 + np.log(2.0)])), [1 / 3, 2 / 3], atol=1e-12)
    out = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


@given(arrays(np.float64, st.integers(1, 16), elements=st.floats(-1e3, 1e3)))
def test_softmax_is_a_distribution(x):
    out = softmax(x)
    assert np.all(out >= 0.0)
    assert abs(out.sum() - 1.0) <= 1e-12


def test_softmax_rejects_empty():
    with pytest.raises(ValueError):
        softmax(np.zeros(0))


def test_finite_diff_examples(rng):
    x = rng.normal(size=(3, 4))
    np.testing.assert_allclose(finite_diff_grad(lambda v: float(v.sum()), x), np.ones_like(x), atol=1e-9)
    grad = finite_diff_grad(lambda v: 0.5 * float(v @ v), np.array([3.0, -2.0]))
    np.testing.assert_allclose(grad, [3.0, -2.0], atol=1e-6)


def test_finite_diff_rejects_non_positive_eps():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda v: 0.0, np.zeros(2), eps=0.0)
