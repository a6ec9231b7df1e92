"""Masked attention over correlation tokens.

Two semantics are provided for one attention head of the scalar-per-channel
formulation (logits over support positions p are Q_d[i,j,k] * K[p,j,k]):

* ``masked_attention_dense`` — f64 reference computed over all t_s support
  rows. ``mode="restricted"`` removes masked rows from the softmax (this is
  the normative behavior); ``mode="literal"`` multiplies logits by the mask,
  so masked rows keep softmax weight exp(0). The two differ whenever a masked
  logit competes with unmasked ones — a study mode kept on purpose.
* ``efficient_masked_attention`` — gathers the unmasked rows once and runs
  the softmax over that subset only, never allocating a buffer of extent t_s.

Allocation accounting is element-exact via an instrumented meter rather than
OS memory, so benchmark numbers are deterministic and platform-independent.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .correlation import FlatMask
from .errors import ConfigError, DimensionError, ValidationError
from .tensor import Tensor, pointwise_linear


@dataclass
class AttentionInputs:
    """One attention head's operands: Q_d [t_d,t_q,e], K/V [t_s,t_q,e], flat mask."""

    q_d: Tensor
    k: Tensor
    v: Tensor
    mask: FlatMask

    def __post_init__(self):
        q_d, k, v = np.asarray(self.q_d), np.asarray(self.k), np.asarray(self.v)
        if q_d.ndim != 3 or k.ndim != 3:
            raise DimensionError(f"attention inputs must be 3-D, got {q_d.shape} / {k.shape}")
        if k.shape != v.shape:
            raise DimensionError(f"K {k.shape} and V {v.shape} must share shape")
        if q_d.shape[1:] != k.shape[1:]:
            raise DimensionError(f"Q_d {q_d.shape} incompatible with K {k.shape}")
        if len(self.mask) != k.shape[0]:
            raise DimensionError(f"mask length {len(self.mask)} vs t_s {k.shape[0]}")
        if q_d.shape[0] < 1:
            raise ValidationError("t_d must be >= 1")


@dataclass
class GatherIndex:
    """Sorted support positions with mask bit 1; never empty (trailing class token)."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp)
        if idx.size == 0 or np.any(np.diff(idx) <= 0):
            raise ValidationError("gather index must be nonempty and strictly increasing")
        self.indices = idx

    def __len__(self) -> int:
        return self.indices.size


class AllocationMeter:
    """Element-count accounting for score/weight/gather buffers; contention-safe."""

    def __init__(self):
        self._lock = threading.Lock()
        self._current: Dict[str, int] = {}
        self._peak: Dict[str, int] = {}

    def alloc(self, category: str, elements: int) -> None:
        with self._lock:
            cur = self._current.get(category, 0) + int(elements)
            self._current[category] = cur
            self._peak[category] = max(self._peak.get(category, 0), cur)

    def free(self, category: str, elements: int) -> None:
        with self._lock:
            self._current[category] = self._current.get(category, 0) - int(elements)

    def peak(self, category: str) -> int:
        return self._peak.get(category, 0)

    def current(self, category: str) -> int:
        return self._current.get(category, 0)

    def report(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._peak)


@dataclass
class AllocationReport:
    """Element counts for one attention configuration."""

    scores: int
    weights: int
    gathered: int

    @property
    def total(self) -> int:
        return self.scores + self.weights + self.gathered


def allocation_estimate(t_s: int, t_q: int, e: int, mask_popcount: int,
                        mode: str) -> AllocationReport:
    """Predicted peak buffer elements; must match the instrumented meter exactly."""
    if min(t_s, t_q, e, mask_popcount) < 1:
        raise ValidationError("allocation_estimate arguments must be positive")
    if mask_popcount > t_s:
        raise ValidationError(f"popcount {mask_popcount} exceeds t_s {t_s}")
    if mode == "dense":
        return AllocationReport(scores=t_s * t_q * e, weights=t_s * t_q * e, gathered=0)
    if mode == "efficient":
        per = mask_popcount * t_q * e
        return AllocationReport(scores=per, weights=per, gathered=2 * per)
    raise ValidationError(f"unknown mode {mode!r}")


def apply_mask(z: Tensor, mask: FlatMask) -> Tuple[Tensor, GatherIndex]:
    """Keep rows with mask bit 1, in order; masked rows are excluded entirely."""
    z = np.asarray(z)
    if z.shape[0] != len(mask):
        raise DimensionError(f"apply_mask: rows {z.shape[0]} vs mask length {len(mask)}")
    idx = np.flatnonzero(mask.bits)
    return z[idx], GatherIndex(indices=idx)


def masked_attention_dense(inputs: AttentionInputs, mode: str = "restricted",
                           meter: Optional[AllocationMeter] = None) -> Tensor:
    """Dense f64 reference over all support rows, in literal or restricted semantics."""
    if mode not in ("literal", "restricted"):
        raise ValidationError(f"unknown attention mode {mode!r}")
    q_d = np.asarray(inputs.q_d, dtype=np.float64)
    k = np.asarray(inputs.k, dtype=np.float64)
    v = np.asarray(inputs.v, dtype=np.float64)
    bits = inputs.mask.bits
    t_d, t_q, e = q_d.shape
    t_s = k.shape[0]
    per_buffer = t_s * t_q * e
    keep = bits.astype(bool)

    out = np.empty((t_d, t_q, e))
    for i in range(t_d):
        if meter:
            meter.alloc("scores", per_buffer)
        scores = q_d[i][None, :, :] * k
        if mode == "literal":
            scores = scores * bits[:, None, None]
            scores -= scores.max(axis=0, keepdims=True)
        else:
            scores[~keep] = -np.inf
            scores -= scores[keep].max(axis=0, keepdims=True)
        if meter:
            meter.alloc("weights", per_buffer)
        weights = np.exp(scores)
        if meter:
            meter.free("scores", per_buffer)
        weights /= weights.sum(axis=0, keepdims=True)
        out[i] = np.einsum("pqe,pqe->qe", weights, v)
        if meter:
            meter.free("weights", per_buffer)
    return out


def _gathered_forward(inputs: AttentionInputs, meter: Optional[AllocationMeter],
                      keep_weights: bool):
    """Shared efficient forward: returns (out, k_g, v_g, idx, weights or None)."""
    q_d = np.asarray(inputs.q_d)
    t_d, t_q, e = q_d.shape
    k_g, idx = apply_mask(inputs.k, inputs.mask)
    v_g, _ = apply_mask(inputs.v, inputs.mask)
    m = len(idx)
    per_buffer = m * t_q * e
    if meter:
        meter.alloc("gathered", 2 * per_buffer)

    out = np.empty((t_d, t_q, e), dtype=np.result_type(q_d, k_g))
    all_weights = np.empty((t_d, m, t_q, e), dtype=out.dtype) if keep_weights else None
    for i in range(t_d):
        if meter:
            meter.alloc("scores", per_buffer)
        scores = q_d[i][None, :, :] * k_g
        scores -= scores.max(axis=0, keepdims=True)
        if meter:
            meter.alloc("weights", per_buffer)
        weights = np.exp(scores)
        if meter:
            meter.free("scores", per_buffer)
        weights /= weights.sum(axis=0, keepdims=True)
        out[i] = np.einsum("mqe,mqe->qe", weights, v_g)
        if all_weights is not None:
            all_weights[i] = weights
        if meter:
            meter.free("weights", per_buffer)
    if meter:
        meter.free("gathered", 2 * per_buffer)
    return out, k_g, v_g, idx, all_weights


def efficient_masked_attention(inputs: AttentionInputs,
                               meter: Optional[AllocationMeter] = None,
                               return_weights: bool = False):
    """Gather-then-softmax attention; equals the restricted dense oracle.

    Score and weight buffers only ever span the |p^o| gathered rows, one
    downscaled token at a time, so the peak footprint is popcount*t_q*e.
    """
    out, _, _, idx, weights = _gathered_forward(inputs, meter, keep_weights=return_weights)
    if return_weights:
        return out, weights, idx
    return out


def efficient_masked_attention_backward(inputs: AttentionInputs, upstream: Tensor):
    """Analytic gradients (dQ_d, dK, dV) of the efficient forward.

    Masked-out K/V rows are excluded from the graph, so their gradients are
    exactly zero.
    """
    upstream = np.asarray(upstream)
    q_d = np.asarray(inputs.q_d)
    if upstream.shape != q_d.shape:
        raise DimensionError(f"upstream {upstream.shape} vs output {q_d.shape}")
    out, k_g, v_g, idx, weights = _gathered_forward(inputs, None, keep_weights=True)

    dq = np.zeros_like(q_d)
    dk_g = np.zeros_like(k_g)
    dv_g = np.zeros_like(v_g)
    for i in range(q_d.shape[0]):
        w = weights[i]                                     # [m, t_q, e]
        g = upstream[i][None, :, :]                        # broadcast over gathered rows
        dv_g += w * g
        ds = w * (g * (v_g - out[i][None, :, :]))          # softmax Jacobian applied to g*v
        dq[i] = np.einsum("mqe,mqe->qe", ds, k_g)
        dk_g += ds * q_d[i][None, :, :]
    dk = np.zeros_like(np.asarray(inputs.k))
    dv = np.zeros_like(np.asarray(inputs.v))
    dk[idx.indices] = dk_g
    dv[idx.indices] = dv_g
    return dq, dk, dv


@dataclass
class MultiHeadParams:
    """K/V projections and the output projection for one attention block."""

    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_out: Tensor
    b_out: Tensor


def _head_slices(e_total: int, heads: int):
    if heads < 1 or e_total % heads:
        raise ConfigError(f"channels {e_total} not divisible by heads {heads}")
    hs = e_total // heads
    return [slice(h * hs, (h + 1) * hs) for h in range(heads)]


def multi_head_masked_attention(q_d: Tensor, source: Tensor, mask: FlatMask, heads: int,
                                params: MultiHeadParams,
                                meter: Optional[AllocationMeter] = None) -> Tensor:
    """Split channels into contiguous head groups, attend per head, concat, project.

    ``q_d`` is the already-downscaled query path; K and V are projected from
    ``source`` (the embedded correlation state) inside.
    """
    q_d, source = np.asarray(q_d), np.asarray(source)
    k = pointwise_linear(source, params.w_k, params.b_k)
    v = pointwise_linear(source, params.w_v, params.b_v)
    out = np.empty_like(q_d)
    for sl in _head_slices(q_d.shape[-1], heads):
        out[..., sl] = efficient_masked_attention(
            AttentionInputs(q_d=q_d[..., sl], k=k[..., sl], v=v[..., sl], mask=mask),
            meter=meter)
    return pointwise_linear(out, params.w_out, params.b_out)


def multi_head_attention_vjp(q_d: Tensor, source: Tensor, mask: FlatMask, heads: int,
                             params: MultiHeadParams, upstream: Tensor):
    """Gradients of multi_head_masked_attention w.r.t. q_d, source, and params."""
    from .tensor import pointwise_linear_vjp

    q_d, source, upstream = np.asarray(q_d), np.asarray(source), np.asarray(upstream)
    k = pointwise_linear(source, params.w_k, params.b_k)
    v = pointwise_linear(source, params.w_v, params.b_v)
    concat = np.empty_like(q_d)
    slices = _head_slices(q_d.shape[-1], heads)
    for sl in slices:
        concat[..., sl] = efficient_masked_attention(
            AttentionInputs(q_d=q_d[..., sl], k=k[..., sl], v=v[..., sl], mask=mask))

    g_concat, dw_out, db_out = pointwise_linear_vjp(concat, params.w_out, upstream)
    g_qd = np.zeros_like(q_d)
    g_k = np.zeros_like(k)
    g_v = np.zeros_like(v)
    for sl in slices:
        dq, dk, dv = efficient_masked_attention_backward(
            AttentionInputs(q_d=q_d[..., sl], k=k[..., sl], v=v[..., sl], mask=mask),
            g_concat[..., sl])
        g_qd[..., sl] = dq
        g_k[..., sl] = dk
        g_v[..., sl] = dv
    g_src_k, dw_k, db_k = pointwise_linear_vjp(source, params.w_k, g_k)
    g_src_v, dw_v, db_v = pointwise_linear_vjp(source, params.w_v, g_v)
    grads = {"w_k": dw_k, "b_k": db_k, "w_v": dw_v, "b_v": db_v,
             "w_out": dw_out, "b_out": db_out}
    return g_qd, g_src_k + g_src_v, grads
