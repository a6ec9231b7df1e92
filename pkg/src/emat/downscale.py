"""Learnable downscaling of the query matrix between attention layers.

Image tokens are laid out on the support grid and convolved per query position
(t_q acts as batch); the class token is transformed by its own pointwise map
and is never pooled or convolved together with image tokens. Layer 1 shrinks
the grid (20x20 -> 10x10 by default); layer 2 convolves in place and then
average-pools the whole grid down to a single spatial token.

Borders are replicate-padded so sum-one kernels preserve constant fields.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, _conv2d, pointwise_linear, pointwise_linear_vjp


@dataclass
class DownscaleParams:
    """Grouped spatial kernel plus the class-token map for one layer."""

    kernel: Tensor      # [groups, kh, kw, e/groups, e/groups]
    conv_bias: Tensor   # [e]
    class_w: Tensor     # [e, e]
    class_b: Tensor     # [e]
    in_grid: Tuple[int, int]
    out_grid: Tuple[int, int]
    stride: int
    layer: int          # 1 keeps the grid, 2 pools it to a single token

    def __post_init__(self):
        if self.layer not in (1, 2):
            raise ConfigError(f"downscale layer must be 1 or 2, got {self.layer}")
        if self.kernel.ndim != 5 or self.kernel.shape[3] != self.kernel.shape[4]:
            raise DimensionError(f"kernel must be [groups, kh, kw, e/g, e/g], got {self.kernel.shape}")

    @property
    def groups(self) -> int:
        return self.kernel.shape[0]

    @property
    def channels(self) -> int:
        return self.kernel.shape[0] * self.kernel.shape[3]

    @property
    def pad(self) -> int:
        return (self.kernel.shape[1] - 1) // 2

    def group_slices(self):
        eg = self.kernel.shape[3]
        return [slice(g * eg, (g + 1) * eg) for g in range(self.groups)]


def infer_stride(n_in: int, n_out: int, kernel: int, pad: int) -> int:
    """Smallest stride mapping n_in to exactly n_out under the conv arithmetic."""
    for s in range(1, n_in + 2 * pad + 1):
        if (n_in + 2 * pad - kernel) // s + 1 == n_out:
            return s
    raise DimensionError(f"no stride maps {n_in} -> {n_out} with kernel {kernel}, pad {pad}")


def init_downscale_params(e: int, in_grid: Tuple[int, int], out_grid: Tuple[int, int],
                          layer: int, rng: np.random.Generator, groups: int = 1,
                          noise: float = 0.01, kernel_size: int = 3) -> DownscaleParams:
    """Box-filter (identity-per-channel) kernels plus seeded noise.

    With zero noise the untrained module acts like average pooling on the grid
    and a pass-through on the class token.
    """
    if e % groups:
        raise ConfigError(f"channels {e} not divisible by groups {groups}")
    eg = e // groups
    pad = (kernel_size - 1) // 2
    box = np.zeros((kernel_size, kernel_size, eg, eg), dtype=np.float32)
    for c in range(eg):
        box[:, :, c, c] = 1.0 / (kernel_size * kernel_size)
    kernel = np.stack([box + noise * rng.normal(size=box.shape).astype(np.float32)
                       for _ in range(groups)])
    class_w = np.eye(e, dtype=np.float32) + noise * rng.normal(size=(e, e)).astype(np.float32)
    stride_h = infer_stride(in_grid[0], out_grid[0], kernel_size, pad)
    stride_w = infer_stride(in_grid[1], out_grid[1], kernel_size, pad)
    if stride_h != stride_w:
        raise DimensionError(f"anisotropic strides {stride_h}/{stride_w} unsupported")
    return DownscaleParams(
        kernel=kernel, conv_bias=np.zeros(e, dtype=np.float32),
        class_w=class_w, class_b=np.zeros(e, dtype=np.float32),
        in_grid=tuple(in_grid), out_grid=tuple(out_grid), stride=stride_h, layer=layer)


def params_astype(params: DownscaleParams, dtype) -> DownscaleParams:
    return dataclasses.replace(
        params, kernel=params.kernel.astype(dtype), conv_bias=params.conv_bias.astype(dtype),
        class_w=params.class_w.astype(dtype), class_b=params.class_b.astype(dtype))


def replace_param(params: DownscaleParams, name: str, value: Tensor) -> DownscaleParams:
    return dataclasses.replace(params, **{name: value})


def _split(q: Tensor, params: DownscaleParams):
    h1, w1 = params.in_grid
    if q.ndim != 3 or q.shape[0] != h1 * w1 + 1:
        raise DimensionError(f"q first extent {q.shape} does not match grid {h1}x{w1}+1")
    if q.shape[-1] != params.channels:
        raise DimensionError(f"q channels {q.shape[-1]} vs params channels {params.channels}")
    return q[:-1], q[-1]


def _grid_layout(img: Tensor, params: DownscaleParams) -> Tensor:
    """[h1*w1, t_q, e] -> [t_q, h1, w1, e] with t_q as conv batch."""
    h1, w1 = params.in_grid
    return img.reshape(h1, w1, *img.shape[1:]).transpose(2, 0, 1, 3)


def _token_layout(y: Tensor) -> Tensor:
    """[t_q, h2, w2, e] -> [h2*w2, t_q, e]."""
    t_q, h2, w2, e = y.shape
    return y.transpose(1, 2, 0, 3).reshape(h2 * w2, t_q, e)


def _conv_tokens(img: Tensor, params: DownscaleParams) -> Tensor:
    x = _grid_layout(img, params)
    p = params.pad
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode="edge") if p else x
    parts = [_conv2d(xp[..., sl], params.kernel[g], params.stride, pad=0)
             for g, sl in enumerate(params.group_slices())]
    y = np.concatenate(parts, axis=-1) if len(parts) > 1 else parts[0]
    if y.shape[1:3] != tuple(params.out_grid):
        raise DimensionError(f"conv produced grid {y.shape[1:3]}, expected {params.out_grid}")
    return y + params.conv_bias


def downscale_layer1(q: Tensor, params: DownscaleParams) -> Tensor:
    """[h1*w1+1, t_q, e] -> [h2*w2+1, t_q, e]: convolve image tokens, map class token."""
    img, cls = _split(np.asarray(q), params)
    tokens = _token_layout(_conv_tokens(img, params))
    cls2 = pointwise_linear(cls, params.class_w, params.class_b)
    return np.concatenate([tokens, cls2[None]], axis=0)


def downscale_layer2(q: Tensor, params: DownscaleParams) -> Tensor:
    """[h*w+1, t_q, e] -> [2, t_q, e]: conv, average-pool the grid, map class token."""
    img, cls = _split(np.asarray(q), params)
    y = _conv_tokens(img, params)
    pooled = y.mean(axis=(1, 2))
    cls2 = pointwise_linear(cls, params.class_w, params.class_b)
    return np.stack([pooled, cls2], axis=0)


def downscale(q: Tensor, params: DownscaleParams) -> Tensor:
    return downscale_layer2(q, params) if params.layer == 2 else downscale_layer1(q, params)


def _conv2d_vjp_core(xp: Tensor, kernel: Tensor, stride: int, g: Tensor):
    """Gradients of the unpadded conv core w.r.t. padded input and kernel."""
    kh, kw = kernel.shape[:2]
    h2, w2 = g.shape[1:3]
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernel)
    for di in range(kh):
        for dj in range(kw):
            rows = slice(di, di + (h2 - 1) * stride + 1, stride)
            cols = slice(dj, dj + (w2 - 1) * stride + 1, stride)
            dk[di, dj] = np.einsum("nijc,nijo->co", xp[:, rows, cols, :], g)
            dxp[:, rows, cols, :] += np.einsum("nijo,co->nijc", g, kernel[di, dj])
    return dxp, dk


def _fold_edge_pad(dxp: Tensor, pad: int, h: int, w: int) -> Tensor:
    """Accumulate replicate-pad gradients back onto the border source pixels."""
    if pad == 0:
        return dxp
    rows = np.clip(np.arange(h + 2 * pad) - pad, 0, h - 1)
    cols = np.clip(np.arange(w + 2 * pad) - pad, 0, w - 1)
    tmp = np.zeros((dxp.shape[0], h) + dxp.shape[2:], dtype=dxp.dtype)
    np.add.at(np.moveaxis(tmp, 1, 0), rows, np.moveaxis(dxp, 1, 0))
    out = np.zeros((dxp.shape[0], h, w, dxp.shape[3]), dtype=dxp.dtype)
    np.add.at(np.moveaxis(out, 2, 0), cols, np.moveaxis(tmp, 2, 0))
    return out


def _conv_tokens_vjp(img: Tensor, params: DownscaleParams, g_y: Tensor):
    x = _grid_layout(img, params)
    p = params.pad
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode="edge") if p else x
    dxp = np.zeros_like(xp)
    dkernel = np.zeros_like(params.kernel)
    for g, sl in enumerate(params.group_slices()):
        dxp_g, dk_g = _conv2d_vjp_core(xp[..., sl], params.kernel[g], params.stride, g_y[..., sl])
        dxp[..., sl] = dxp_g
        dkernel[g] = dk_g
    dbias = g_y.sum(axis=(0, 1, 2))
    dx = _fold_edge_pad(dxp, p, *params.in_grid)
    h1, w1 = params.in_grid
    g_img = dx.transpose(1, 2, 0, 3).reshape(h1 * w1, *img.shape[1:])
    return g_img, dkernel, dbias


def downscale_vjp(q: Tensor, params: DownscaleParams, upstream: Tensor):
    """Gradients of downscale w.r.t. q and every parameter tensor."""
    q = np.asarray(q)
    img, cls = _split(q, params)
    h2, w2 = params.out_grid
    t_q, e = img.shape[1:]
    if params.layer == 2:
        if upstream.shape != (2, t_q, e):
            raise DimensionError(f"upstream {upstream.shape}, expected {(2, t_q, e)}")
        g_y = np.broadcast_to(upstream[0][:, None, None, :] / (h2 * w2),
                              (t_q, h2, w2, e)).astype(upstream.dtype)
        g_cls2 = upstream[1]
    else:
        if upstream.shape != (h2 * w2 + 1, t_q, e):
            raise DimensionError(f"upstream {upstream.shape}, expected {(h2 * w2 + 1, t_q, e)}")
        g_y = upstream[:-1].reshape(h2, w2, t_q, e).transpose(2, 0, 1, 3)
        g_cls2 = upstream[-1]
    g_cls, dw_c, db_c = pointwise_linear_vjp(cls, params.class_w, g_cls2)
    g_img, dkernel, dbias = _conv_tokens_vjp(img, params, g_y)
    dq = np.concatenate([g_img, g_cls[None]], axis=0)
    return dq, {"kernel": dkernel, "conv_bias": dbias, "class_w": dw_c, "class_b": db_c}
