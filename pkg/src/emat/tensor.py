"""Dense-tensor substrate: the handful of array kernels everything else builds on.

Tensors are plain row-major numpy arrays — float32 on production paths,
float64 inside oracles. All functions are pure.
"""

from __future__ import annotations

from typing import Callable, Tuple

import numpy as np

from .errors import DimensionError, NumericError

Tensor = np.ndarray


def pointwise_linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the trailing axis: out[..., o] = b[o] + sum_i w[o, i] * x[..., i]."""
    x, w, b = np.asarray(x), np.asarray(w), np.asarray(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"pointwise_linear: x {x.shape} does not match w {w.shape}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"pointwise_linear: bias {b.shape} does not match w {w.shape}")
    return x @ w.T + b


def pointwise_linear_vjp(x: Tensor, w: Tensor, g: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients of pointwise_linear for upstream g: returns (dx, dw, db)."""
    x, w, g = np.asarray(x), np.asarray(w), np.asarray(g)
    dx = g @ w
    g2 = g.reshape(-1, w.shape[0])
    dw = g2.T @ x.reshape(-1, w.shape[1])
    return dx, dw, g2.sum(axis=0)


def _conv2d(x: Tensor, kernel: Tensor, stride: int, pad: int, pad_mode: str = "constant") -> Tensor:
    """Batched cross-correlation, x: [n, h, w, c], kernel: [kh, kw, c, c_out]."""
    n, h, w, c = x.shape
    kh, kw, kc, c_out = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv kernel extents must be odd, got {kh}x{kw}")
    if kc != c:
        raise DimensionError(f"conv: input channels {c} vs kernel channels {kc}")
    h2 = (h + 2 * pad - kh) // stride + 1
    w2 = (w + 2 * pad - kw) // stride + 1
    if h2 < 1 or w2 < 1:
        raise DimensionError(f"conv output extent {h2}x{w2} < 1 for input {h}x{w}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode=pad_mode) if pad else x
    out = np.zeros((n, h2, w2, c_out), dtype=np.result_type(x, kernel))
    for di in range(kh):
        for dj in range(kw):
            xs = xp[:, di:di + (h2 - 1) * stride + 1:stride, dj:dj + (w2 - 1) * stride + 1:stride, :]
            out += np.einsum("nijc,co->nijo", xs, kernel[di, dj])
    return out


def conv_spatial(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of one spatial map [h, w, c] with zero padding."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"conv_spatial expects [h, w, c], got {x.shape}")
    return _conv2d(x[None], np.asarray(kernel), stride, pad)[0]


def _lerp_coeffs(n_in: int, n_out: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center sample positions, clamped to borders."""
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def _interp_axis(x: Tensor, axis: int, n_out: int) -> Tensor:
    lo, hi, t = _lerp_coeffs(x.shape[axis], n_out)
    a = np.take(x, lo, axis=axis)
    b = np.take(x, hi, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = n_out
    t = t.reshape(shape)
    # lerp form a + t*(b - a): exact on constant fields since b - a == 0
    return (a + t * (b - a)).astype(x.dtype, copy=False)


def bilinear_resize(x: Tensor, h2: int, w2: int) -> Tensor:
    """Bilinear resample of [h, w, c] to [h2, w2, c] under half-pixel centers."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"bilinear_resize expects [h, w, c], got {x.shape}")
    if h2 < 1 or w2 < 1:
        raise DimensionError(f"bilinear_resize target {h2}x{w2} < 1")
    if (h2, w2) == x.shape[:2]:
        return x.copy()
    return _interp_axis(_interp_axis(x, 0, h2), 1, w2)


def _interp_axis_backward(g: Tensor, axis: int, n_in: int) -> Tensor:
    lo, hi, t = _lerp_coeffs(n_in, g.shape[axis])
    shape = [1] * g.ndim
    shape[axis] = g.shape[axis]
    t = t.reshape(shape)
    out_shape = list(g.shape)
    out_shape[axis] = n_in
    out = np.zeros(out_shape, dtype=np.result_type(g, t))
    gm = np.moveaxis(out, axis, 0)
    np.add.at(gm, lo, np.moveaxis(g * (1.0 - t), axis, 0))
    np.add.at(gm, hi, np.moveaxis(g * t, axis, 0))
    return out


def bilinear_resize_backward(g: Tensor, h: int, w: int) -> Tensor:
    """Adjoint of bilinear_resize: scatter upstream [h2, w2, c] back to [h, w, c]."""
    g = np.asarray(g)
    if (h, w) == g.shape[:2]:
        return g.copy()
    return _interp_axis_backward(_interp_axis_backward(g, 1, w), 0, h)


def finite_diff_gradient(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time in f64."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        fp = float(f(x))
        flat[i] = saved - h
        fm = float(f(x))
        flat[i] = saved
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"finite_diff_gradient: non-finite f at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x) — smooth, so finite-difference checks stay clean."""
    return x * sigmoid(x)


def silu_grad(x: Tensor) -> Tensor:
    """d/dx silu(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x)))."""
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))
