"""Correlation tensor construction and segmentation-mask preprocessing.

Builds the t_s x t_q x (layers*heads) cosine-similarity volume between a
support and a query token stack, and turns full-resolution binary masks into
flat attention masks with a protected trailing class-token bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import DimensionError, ValidationError
from .tensor import Tensor, bilinear_resize


@dataclass
class TokenStack:
    """Per-layer, per-head tokens from a frozen feature extractor.

    image_tokens: [layers, heads, h, w, d]; class_token: [layers, heads, d].
    """

    image_tokens: Tensor
    class_token: Tensor
    patch_size: int
    image_h: int
    image_w: int

    def __post_init__(self):
        it, ct = np.asarray(self.image_tokens), np.asarray(self.class_token)
        if it.ndim != 5 or ct.ndim != 3:
            raise ValidationError(
                f"token stack shapes {it.shape} / {ct.shape}, want [l,g,h,w,d] / [l,g,d]")
        layers, heads, h, w, d = it.shape
        if ct.shape != (layers, heads, d):
            raise DimensionError(f"class token {ct.shape} does not match image tokens {it.shape}")
        if d < 1 or layers * heads < 1:
            raise ValidationError("token stack needs d >= 1 and layers*heads >= 1")
        if self.patch_size < 1 or self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValidationError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch_size}")
        if (self.image_h // self.patch_size, self.image_w // self.patch_size) != (h, w):
            raise ValidationError(
                f"token grid {h}x{w} inconsistent with image {self.image_h}x{self.image_w} "
                f"@ patch {self.patch_size}")

    @property
    def layers(self) -> int:
        return self.image_tokens.shape[0]

    @property
    def heads(self) -> int:
        return self.image_tokens.shape[1]

    @property
    def grid(self) -> Tuple[int, int]:
        return self.image_tokens.shape[2], self.image_tokens.shape[3]

    @property
    def dim(self) -> int:
        return self.image_tokens.shape[4]


@dataclass
class CorrelationTensor:
    """Cosine-similarity volume, values: [t_s, t_q, layers*heads], entries in [-1, 1]."""

    values: Tensor
    grid: Tuple[int, int]  # support grid (h', w'); t_s = h'*w' + 1

    @property
    def t_s(self) -> int:
        return self.values.shape[0]

    @property
    def t_q(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass
class FlatMask:
    """Length-t_s binary vector; the trailing class-token bit is always 1."""

    bits: np.ndarray
    grid: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.ndim != 1 or bits.size < 1:
            raise ValidationError(f"flat mask must be a nonempty vector, got shape {bits.shape}")
        if not np.all((bits == 0) | (bits == 1)):
            raise ValidationError("flat mask entries must be 0 or 1")
        if bits[-1] != 1:
            raise ValidationError("flat mask must end in 1 (class token is never masked)")
        self.bits = bits

    def __len__(self) -> int:
        return self.bits.size

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())


def _normalized_rows(tokens: Tensor) -> Tensor:
    """Unit-normalize trailing-axis vectors; zero vectors stay zero (cosine := 0)."""
    norms = np.linalg.norm(tokens.astype(np.float64), axis=-1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return (tokens / safe).astype(tokens.dtype, copy=False)


def build_correlation(
    support: TokenStack,
    query: TokenStack,
    target_grid: Tuple[int, int],
    clamp_negative: bool = False,
) -> CorrelationTensor:
    """Cosine similarity between resized support tokens (+ class token) and query tokens."""
    if (support.layers, support.heads, support.dim) != (query.layers, query.heads, query.dim):
        raise DimensionError(
            f"support stack [l,g,d]=({support.layers},{support.heads},{support.dim}) vs "
            f"query ({query.layers},{query.heads},{query.dim})")
    h2, w2 = target_grid
    layers, heads, d = support.layers, support.heads, support.dim
    qh, qw = query.grid
    t_s, t_q = h2 * w2 + 1, qh * qw

    sup = np.empty((layers * heads, t_s, d), dtype=np.float32)
    que = np.empty((layers * heads, t_q, d), dtype=np.float32)
    for li in range(layers):
        for g in range(heads):
            c = li * heads + g
            resized = bilinear_resize(support.image_tokens[li, g], h2, w2)
            sup[c, :-1] = resized.reshape(t_s - 1, d)
            sup[c, -1] = support.class_token[li, g]
            que[c] = query.image_tokens[li, g].reshape(t_q, d)

    values = np.einsum("cpd,cqd->pqc", _normalized_rows(sup), _normalized_rows(que))
    # f32 rounding can overshoot the mathematical range by an ulp
    np.clip(values, -1.0, 1.0, out=values)
    if clamp_negative:
        np.maximum(values, 0.0, out=values)
    return CorrelationTensor(values=values, grid=(h2, w2))


def prepare_mask(mask: Tensor, target_grid: Tuple[int, int]) -> FlatMask:
    """Downscale a binary H x W mask by any-overlap binarization, flatten, append 1."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValidationError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValidationError("mask entries must be 0 or 1")
    h2, w2 = target_grid
    hh, ww = mask.shape
    if h2 < 1 or w2 < 1 or h2 > hh or w2 > ww:
        raise DimensionError(f"target grid {h2}x{w2} invalid for mask {hh}x{ww}")
    mask = mask.astype(np.uint8)
    row_edges = (np.arange(h2) * hh) // h2
    col_edges = (np.arange(w2) * ww) // w2
    # any-overlap: a cell is 1 iff any covered source pixel is 1
    cells = np.maximum.reduceat(np.maximum.reduceat(mask, row_edges, axis=0), col_edges, axis=1)
    bits = np.concatenate([cells.reshape(-1), np.ones(1, dtype=np.uint8)])
    return FlatMask(bits=bits, grid=(h2, w2))
