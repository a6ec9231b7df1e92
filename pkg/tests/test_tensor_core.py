"""Tensor substrate: frozen examples plus independent f64 loop oracles."""

import numpy as np
import pytest

from emat import tensor
from emat.errors import DimensionError, NumericError

from conftest import rel_err, rng


# ---------------------------------------------------------------- oracles

def linear_loop_oracle(x, w, b):
    """f64 triple loop for the affine map, no matmul."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lead = x.shape[:-1]
    out = np.zeros(lead + (w.shape[0],))
    for idx in np.ndindex(*lead):
        for o in range(w.shape[0]):
            acc = b[o]
            for i in range(w.shape[1]):
                acc += w[o, i] * x[idx + (i,)]
            out[idx + (o,)] = acc
    return out


def conv_loop_oracle(x, kernel, stride, pad):
    """f64 loop cross-correlation with zero padding."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    h, w, c = x.shape
    kh, kw, _, c_out = kernel.shape
    xp = np.zeros((h + 2 * pad, w + 2 * pad, c))
    xp[pad:pad + h, pad:pad + w] = x
    h2 = (h + 2 * pad - kh) // stride + 1
    w2 = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((h2, w2, c_out))
    for i in range(h2):
        for j in range(w2):
            for o in range(c_out):
                acc = 0.0
                for di in range(kh):
                    for dj in range(kw):
                        for ci in range(c):
                            acc += xp[i * stride + di, j * stride + dj, ci] * kernel[di, dj, ci, o]
                out[i, j, o] = acc
    return out


def resize_loop_oracle(x, h2, w2):
    """f64 loop implementing half-pixel-center sampling with border clamping."""
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    out = np.zeros((h2, w2, c))
    for i in range(h2):
        si = min(max((i + 0.5) * h / h2 - 0.5, 0.0), h - 1.0)
        i0 = int(np.floor(si))
        i1 = min(i0 + 1, h - 1)
        ti = si - i0
        for j in range(w2):
            sj = min(max((j + 0.5) * w / w2 - 0.5, 0.0), w - 1.0)
            j0 = int(np.floor(sj))
            j1 = min(j0 + 1, w - 1)
            tj = sj - j0
            top = x[i0, j0] * (1 - tj) + x[i0, j1] * tj
            bot = x[i1, j0] * (1 - tj) + x[i1, j1] * tj
            out[i, j] = top * (1 - ti) + bot * ti
    return out


# ---------------------------------------------------------------- pointwise_linear

def test_pointwise_linear_identity():
    out = tensor.pointwise_linear(np.array([1.0, 2.0]), np.eye(2), np.zeros(2))
    assert np.allclose(out, [1.0, 2.0])


def test_pointwise_linear_sum_plus_bias():
    out = tensor.pointwise_linear(np.array([1.0, 1.0]), np.array([[1.0, 1.0]]), np.array([0.5]))
    assert np.allclose(out, [2.5])


def test_pointwise_linear_matches_loop_oracle():
    r = rng(11)
    x = r.normal(size=(3, 4, 5)).astype(np.float32)
    w = r.normal(size=(2, 5)).astype(np.float32)
    b = r.normal(size=2).astype(np.float32)
    out = tensor.pointwise_linear(x, w, b)
    assert out.shape == (3, 4, 2)
    assert rel_err(out, linear_loop_oracle(x, w, b)) < 1e-6


def test_pointwise_linear_is_linear():
    r = rng(12)
    x = r.normal(size=(6, 3)).astype(np.float32)
    y = r.normal(size=(6, 3)).astype(np.float32)
    w = r.normal(size=(4, 3)).astype(np.float32)
    b = np.zeros(4, dtype=np.float32)
    a, c = np.float32(0.7), np.float32(-1.3)
    lhs = tensor.pointwise_linear(a * x + c * y, w, b)
    rhs = a * tensor.pointwise_linear(x, w, b) + c * tensor.pointwise_linear(y, w, b)
    assert rel_err(lhs, rhs) < 1e-6


def test_pointwise_linear_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as e:
        tensor.pointwise_linear(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(4))
    assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)


# ---------------------------------------------------------------- conv_spatial

def test_conv_identity_1x1():
    r = rng(21)
    x = r.normal(size=(4, 5, 3)).astype(np.float32)
    kernel = np.eye(3, dtype=np.float32).reshape(1, 1, 3, 3)
    out = tensor.conv_spatial(x, kernel, stride=1, pad=0)
    assert np.array_equal(out, x)


def test_conv_delta_input_box_kernel():
    x = np.zeros((5, 5, 1), dtype=np.float32)
    x[2, 2, 0] = 1.0
    kernel = np.ones((3, 3, 1, 1), dtype=np.float32)
    out = tensor.conv_spatial(x, kernel, stride=1, pad=1)
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1.0
    assert np.array_equal(out[..., 0], expected)


def test_conv_delta_kernel_is_identity():
    r = rng(22)
    x = r.normal(size=(6, 6, 2)).astype(np.float32)
    kernel = np.zeros((3, 3, 2, 2), dtype=np.float32)
    kernel[1, 1] = np.eye(2)
    out = tensor.conv_spatial(x, kernel, stride=1, pad=1)
    assert rel_err(out, x) < 1e-7


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv_matches_loop_oracle(stride, pad):
    r = rng(23)
    x = r.normal(size=(5, 5, 2)).astype(np.float32)
    kernel = r.normal(size=(3, 3, 2, 3)).astype(np.float32)
    out = tensor.conv_spatial(x, kernel, stride=stride, pad=pad)
    assert rel_err(out, conv_loop_oracle(x, kernel, stride, pad)) < 1e-6


def test_conv_empty_output_is_error():
    x = np.zeros((2, 2, 1), dtype=np.float32)
    kernel = np.zeros((5, 5, 1, 1), dtype=np.float32)
    with pytest.raises(DimensionError):
        tensor.conv_spatial(x, kernel, stride=1, pad=0)


def test_conv_even_kernel_rejected():
    with pytest.raises(DimensionError):
        tensor.conv_spatial(np.zeros((4, 4, 1)), np.zeros((2, 2, 1, 1)), stride=1, pad=0)


# ---------------------------------------------------------------- bilinear_resize

def test_resize_identity_is_bit_equal():
    r = rng(31)
    x = r.normal(size=(7, 5, 3)).astype(np.float32)
    out = tensor.bilinear_resize(x, 7, 5)
    assert np.array_equal(out, x)


def test_resize_2x2_to_mean():
    x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(2, 2, 1)
    out = tensor.bilinear_resize(x, 1, 1)
    assert np.allclose(out, 1.5)


def test_resize_ramp_frozen_and_oracle():
    x = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
    out = tensor.bilinear_resize(x, 2, 2)
    # hand-derived under half-pixel centers: each 2x2 quadrant mean
    assert np.allclose(out[..., 0], [[2.5, 4.5], [10.5, 12.5]])
    assert rel_err(out, resize_loop_oracle(x, 2, 2)) < 1e-6


@pytest.mark.parametrize("h2,w2", [(3, 7), (10, 10), (1, 1), (9, 2)])
def test_resize_matches_loop_oracle(h2, w2):
    r = rng(32)
    x = r.normal(size=(6, 4, 2)).astype(np.float32)
    out = tensor.bilinear_resize(x, h2, w2)
    assert rel_err(out, resize_loop_oracle(x, h2, w2)) < 1e-6


def test_resize_preserves_constants_exactly():
    x = np.full((5, 3, 2), np.float32(0.37), dtype=np.float32)
    for h2, w2 in [(2, 2), (9, 11), (1, 4)]:
        out = tensor.bilinear_resize(x, h2, w2)
        assert np.array_equal(out, np.full((h2, w2, 2), np.float32(0.37)))


def test_resize_backward_is_adjoint():
    # <g, R x> == <R^T g, x> for a linear map
    r = rng(33)
    x = r.normal(size=(4, 5, 2))
    g = r.normal(size=(7, 3, 2))
    fwd = tensor.bilinear_resize(x, 7, 3)
    bwd = tensor.bilinear_resize_backward(g, 4, 5)
    assert abs(np.sum(g * fwd) - np.sum(bwd * x)) < 1e-9


# ---------------------------------------------------------------- finite_diff_gradient

def test_finite_diff_square():
    g = tensor.finite_diff_gradient(lambda t: float(np.sum(t * t)), np.array([3.0]), h=1e-3)
    assert abs(g[0] - 6.0) < 1e-6


def test_finite_diff_constant():
    g = tensor.finite_diff_gradient(lambda t: 4.2, np.ones((3, 2)), h=1e-4)
    assert np.array_equal(g, np.zeros((3, 2)))


def test_finite_diff_quadratic_form_matches_analytic():
    r = rng(41)
    a = r.normal(size=(5, 5))
    a = (a + a.T) / 2
    x = r.normal(size=5)
    g = tensor.finite_diff_gradient(lambda t: float(t @ a @ t), x, h=1e-5)
    assert rel_err(g, 2 * a @ x) < 1e-6


def test_finite_diff_nonfinite_raises():
    with np.errstate(invalid="ignore"), pytest.raises(NumericError):
        tensor.finite_diff_gradient(lambda t: float(np.log(t[0])), np.array([1e-7]), h=1e-3)
