import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blink.numerics import (
    bilinear_resize,
    conv2d,
    conv2d_backward,
    finite_diff_gradient,
    kl_divergence,
    sequential_sum,
    softmax,
)

# hand-computed: softmax([1, 2, 3]) = exp(x) / sum(exp(x))
SOFTMAX_123 = np.array([0.09003057317038046, 0.24472847105479767, 0.6652409557748219])

# hand-computed: 0.75*ln(0.75/0.5) + 0.25*ln(0.25/0.5)
KL_CASE = 0.13081203594113694


def test_softmax_hand_value():
    np.testing.assert_allclose(softmax(np.array([1.0, 2.0, 3.0])), SOFTMAX_123, atol=1e-12)


def test_softmax_temperature_flattens():
    x = np.array([1.0, 2.0, 3.0])
    hot = softmax(x, temperature=10.0)
    cold = softmax(x, temperature=0.1)
    assert hot.max() < cold.max()
    np.testing.assert_allclose(hot.sum(), 1.0, atol=1e-12)


def test_softmax_invariance_to_shift():
    x = np.array([100.0, 101.0, 102.0])
    np.testing.assert_allclose(softmax(x), SOFTMAX_123, atol=1e-12)


def test_softmax_rejects_bad_inputs():
    with pytest.raises(ValueError):
        softmax(np.array([]))
    with pytest.raises(ValueError):
        softmax(np.array([1.0]), temperature=0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=16))
def test_softmax_is_distribution(values):
    out = softmax(np.array(values))
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(), 1.0, atol=1e-9)


def test_bilinear_hand_value_2x2_to_3x3():
    grid = np.array([[0.0, 1.0], [2.0, 3.0]])[:, :, None]
    out = bilinear_resize(grid, (3, 3))
    expected = np.array([[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]])
    np.testing.assert_allclose(out[:, :, 0], expected, atol=1e-12)


def test_bilinear_identity_is_bitwise():
    x = np.random.default_rng(3).normal(size=(5, 7, 4)).astype(np.float32)
    out = bilinear_resize(x, (5, 7))
    assert np.array_equal(out, x)


def test_bilinear_constant_preserved():
    x = np.full((2, 2, 3), 4.25)
    out = bilinear_resize(x, (9, 5))
    np.testing.assert_allclose(out, 4.25, atol=1e-12)


def test_bilinear_corners_exact():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4, 2))
    out = bilinear_resize(x, (11, 9))
    np.testing.assert_allclose(out[0, 0], x[0, 0], atol=1e-12)
    np.testing.assert_allclose(out[-1, -1], x[-1, -1], atol=1e-12)
    np.testing.assert_allclose(out[0, -1], x[0, -1], atol=1e-12)
    np.testing.assert_allclose(out[-1, 0], x[-1, 0], atol=1e-12)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 6, 3))
    kernel = np.zeros((3, 3, 3, 3))
    for c in range(3):
        kernel[c, c, 1, 1] = 1.0
    out = conv2d(x, kernel, np.zeros(3))
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 4, 2))
    kernel = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=3)
    out = conv2d(x, kernel, bias)
    H, W, _ = x.shape
    pad = 1
    xp = np.zeros((H + 2, W + 2, 2))
    xp[1:-1, 1:-1] = x
    expected = np.zeros((H, W, 3))
    for i in range(H):
        for j in range(W):
            for co in range(3):
                acc = bias[co]
                for ci in range(2):
                    for di in range(3):
                        for dj in range(3):
                            acc += xp[i + di, j + dj, ci] * kernel[co, ci, di, dj]
                expected[i, j, co] = acc
    np.testing.assert_allclose(out, expected, atol=1e-10)


def test_conv2d_backward_matches_finite_diff():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 4, 2))
    kernel = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=3)
    d_out = rng.normal(size=(4, 4, 3))

    d_inp, d_k, d_b = conv2d_backward(x, kernel, d_out)

    def loss_wrt_kernel(kflat):
        return float((conv2d(x, kflat.reshape(kernel.shape), bias) * d_out).sum())

    num_k = finite_diff_gradient(loss_wrt_kernel, kernel.ravel()).reshape(kernel.shape)
    np.testing.assert_allclose(d_k, num_k, atol=1e-6)

    def loss_wrt_input(xflat):
        return float((conv2d(xflat.reshape(x.shape), kernel, bias) * d_out).sum())

    num_x = finite_diff_gradient(loss_wrt_input, x.ravel()).reshape(x.shape)
    np.testing.assert_allclose(d_inp, num_x, atol=1e-6)
    np.testing.assert_allclose(d_b, d_out.sum(axis=(0, 1)), atol=1e-12)


def test_kl_hand_value():
    p = np.array([0.75, 0.25])
    q = np.array([0.5, 0.5])
    np.testing.assert_allclose(kl_divergence(p, q), KL_CASE, atol=1e-12)


def test_kl_self_is_zero():
    p = np.array([0.2, 0.3, 0.5])
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)


def test_kl_nonnegative_property():
    rng = np.random.default_rng(9)
    for _ in range(50):
        p = rng.dirichlet(np.ones(6))
        q = rng.dirichlet(np.ones(6))
        assert kl_divergence(p, q) >= -1e-12


def test_kl_rejects_non_distributions():
    with pytest.raises(ValueError):
        kl_divergence(np.array([0.5, 0.6]), np.array([0.5, 0.5]))


def test_finite_diff_on_quadratic():
    a = np.array([1.0, -2.0, 3.0])

    def f(x):
        return float((a * x * x).sum())

    x0 = np.array([0.5, 1.5, -1.0])
    np.testing.assert_allclose(finite_diff_gradient(f, x0), 2 * a * x0, atol=1e-6)


def test_sequential_sum_is_left_to_right():
    values = [1e16, 1.0, -1e16, 1.0]
    acc = 0.0
    for v in values:
        acc += v
    assert sequential_sum(values) == acc
