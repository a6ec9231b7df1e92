"""Two-layer masked-attention model over token correlations, plus the N-way protocol.

The forward path is one support/query pair (binary task); multi-way episodes
run the binary model once per support shot and combine the averaged outputs
with a shared decision threshold.
"""

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .attention import AllocationMeter, MultiHeadParams, multi_head_attention_vjp, \
    multi_head_masked_attention
from .correlation import TokenStack, build_correlation, prepare_mask
from .downscale import DownscaleParams, downscale, downscale_vjp, init_downscale_params
from .downscale import params_astype as _downscale_astype
from .errors import ConfigError, DimensionError, FormatError, ValidationError
from .ioutil import atomic_write_bytes
from .tensor import Tensor, bilinear_resize, bilinear_resize_backward, pointwise_linear, \
    pointwise_linear_vjp, sigmoid, silu, silu_grad

EPS = 1e-7  # probability clamp shared by both losses


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class EmatConfig:
    variant: str
    correlation_channels: int
    grids: Tuple[Tuple[int, int], Tuple[int, int]]  # (layer-1 support grid, layer-2 grid)
    attention_channels: Tuple[int, int]
    head_channels: Tuple[int, int]
    heads: int = 8
    conv_groups_layer1: int = 2
    lambda_clf: float = 0.1
    delta: float = 0.5
    feed_forward: bool = True
    clamp_negative: bool = False
    logit_scale: bool = False

    def __post_init__(self):
        for e in self.attention_channels:
            if e % self.heads:
                raise ConfigError(f"attention width {e} not divisible by {self.heads} heads")

    @staticmethod
    def preset(name: str) -> "EmatConfig":
        if name == "emat":
            return EmatConfig(variant="emat", correlation_channels=72,
                              grids=((20, 20), (10, 10)),
                              attention_channels=(64, 32), head_channels=(32, 16))
        if name == "cst_compat":
            return EmatConfig(variant="cst_compat", correlation_channels=72,
                              grids=((12, 12), (3, 3)),
                              attention_channels=(32, 128), head_channels=(128, 64))
        raise ConfigError(f"unknown preset {name!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["grids"] = [list(g) for g in self.grids]
        d["attention_channels"] = list(self.attention_channels)
        d["head_channels"] = list(self.head_channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "EmatConfig":
        d = dict(d)
        d["grids"] = tuple(tuple(g) for g in d["grids"])
        d["attention_channels"] = tuple(d["attention_channels"])
        d["head_channels"] = tuple(d["head_channels"])
        return EmatConfig(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------- parameters

@dataclass
class LayerParams:
    embed_w: Tensor
    embed_b: Tensor
    q_w: Tensor
    q_b: Tensor
    attn: MultiHeadParams
    down: DownscaleParams
    gn_scale: Tensor
    gn_shift: Tensor
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor


@dataclass
class ClfHeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor


@dataclass
class SegHeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EmatParams:
    layers: List[LayerParams]
    clf: ClfHeadParams
    seg: SegHeadParams

    def flatten(self) -> "Dict[str, Tensor]":
        """Name -> array views, in checkpoint order. Mutations write through."""
        out: Dict[str, Tensor] = {}
        for i, lp in enumerate(self.layers):
            p = f"layers.{i}."
            out[p + "embed_w"], out[p + "embed_b"] = lp.embed_w, lp.embed_b
            out[p + "q_w"], out[p + "q_b"] = lp.q_w, lp.q_b
            for n in ("w_k", "b_k", "w_v", "b_v", "w_out", "b_out"):
                out[p + "attn." + n] = getattr(lp.attn, n)
            out[p + "down.kernel"] = lp.down.kernel
            out[p + "down.conv_bias"] = lp.down.conv_bias
            out[p + "down.class_w"] = lp.down.class_w
            out[p + "down.class_b"] = lp.down.class_b
            out[p + "gn_scale"], out[p + "gn_shift"] = lp.gn_scale, lp.gn_shift
            out[p + "ff1_w"], out[p + "ff1_b"] = lp.ff1_w, lp.ff1_b
            out[p + "ff2_w"], out[p + "ff2_b"] = lp.ff2_w, lp.ff2_b
        for n in ("w1", "b1", "w2", "b2", "w3", "b3"):
            out["clf." + n] = getattr(self.clf, n)
        for n in ("w1", "b1", "w2", "b2"):
            out["seg." + n] = getattr(self.seg, n)
        return out


def _linear_init(r: np.random.Generator, out_dim: int, in_dim: int):
    w = (r.normal(size=(out_dim, in_dim)) / math.sqrt(in_dim)).astype(np.float32)
    return w, np.zeros(out_dim, dtype=np.float32)


def init_params(config: EmatConfig, seed: int) -> EmatParams:
    r = np.random.default_rng(seed)
    e1, e2 = config.attention_channels
    layers = []
    for li, (e, c_in) in enumerate(((e1, config.correlation_channels), (e2, e1))):
        embed_w, embed_b = _linear_init(r, e, c_in)
        q_w, q_b = _linear_init(r, e, e)
        w_k, b_k = _linear_init(r, e, e)
        w_v, b_v = _linear_init(r, e, e)
        w_out, b_out = _linear_init(r, e, e)
        groups = config.conv_groups_layer1 if li == 0 else 1
        in_grid = config.grids[0] if li == 0 else config.grids[1]
        out_grid = config.grids[1]
        down = init_downscale_params(e, in_grid, out_grid, layer=li + 1, rng=r, groups=groups)
        ff1_w, ff1_b = _linear_init(r, e, e)
        ff2_w, ff2_b = _linear_init(r, e, e)
        layers.append(LayerParams(
            embed_w=embed_w, embed_b=embed_b, q_w=q_w, q_b=q_b,
            attn=MultiHeadParams(w_k=w_k, b_k=b_k, w_v=w_v, b_v=b_v,
                                 w_out=w_out, b_out=b_out),
            down=down,
            gn_scale=np.ones(e, dtype=np.float32), gn_shift=np.zeros(e, dtype=np.float32),
            ff1_w=ff1_w, ff1_b=ff1_b, ff2_w=ff2_w, ff2_b=ff2_b))
    h1, h2 = config.head_channels
    cw1, cb1 = _linear_init(r, h1, e2)
    cw2, cb2 = _linear_init(r, h2, h1)
    cw3, cb3 = _linear_init(r, 1, h2)
    sw1, sb1 = _linear_init(r, h2, e2)
    sw2, sb2 = _linear_init(r, 1, h2)
    return EmatParams(layers=layers,
                      clf=ClfHeadParams(w1=cw1, b1=cb1, w2=cw2, b2=cb2, w3=cw3, b3=cb3),
                      seg=SegHeadParams(w1=sw1, b1=sb1, w2=sw2, b2=sb2))


def params_astype(params: EmatParams, dtype) -> EmatParams:
    def conv(a):
        return a.astype(dtype)

    layers = []
    for lp in params.layers:
        layers.append(LayerParams(
            embed_w=conv(lp.embed_w), embed_b=conv(lp.embed_b),
            q_w=conv(lp.q_w), q_b=conv(lp.q_b),
            attn=MultiHeadParams(**{n: conv(getattr(lp.attn, n))
                                    for n in ("w_k", "b_k", "w_v", "b_v", "w_out", "b_out")}),
            down=_downscale_astype(lp.down, dtype),
            gn_scale=conv(lp.gn_scale), gn_shift=conv(lp.gn_shift),
            ff1_w=conv(lp.ff1_w), ff1_b=conv(lp.ff1_b),
            ff2_w=conv(lp.ff2_w), ff2_b=conv(lp.ff2_b)))
    clf = ClfHeadParams(**{n: conv(getattr(params.clf, n))
                           for n in ("w1", "b1", "w2", "b2", "w3", "b3")})
    seg = SegHeadParams(**{n: conv(getattr(params.seg, n))
                           for n in ("w1", "b1", "w2", "b2")})
    return EmatParams(layers=layers, clf=clf, seg=seg)


def count_params(config: EmatConfig) -> Dict[str, int]:
    """Arithmetic parameter census; cross-checked against actual array sizes in tests."""
    e1, e2 = config.attention_channels
    h1, h2 = config.head_channels

    def block(e: int, c_in: int, groups: int) -> int:
        n = (e * c_in + e)            # embedding
        n += 3 * (e * e + e)          # Q, K, V projections
        n += 9 * e * e // groups + e  # 3x3 downscale conv
        n += e * e + e                # class-token map
        n += e * e + e                # output projection
        if config.feed_forward:
            n += 2 * e + 2 * (e * e + e)  # group norm + two-linear feed-forward
        return n

    counts = {"layers.0": block(e1, config.correlation_channels, config.conv_groups_layer1),
              "layers.1": block(e2, e1, 1),
              "clf_head": (h1 * e2 + h1) + (h2 * h1 + h2) + (h2 + 1),
              "seg_head": (h2 * e2 + h2) + (h2 + 1)}
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------- group norm

def group_norm(x: Tensor, groups: int, scale: Tensor, shift: Tensor,
               eps: float = 1e-5) -> Tensor:
    e = x.shape[-1]
    if e % groups:
        raise ConfigError(f"channels {e} not divisible by {groups} norm groups")
    xg = x.reshape(x.shape[:-1] + (groups, e // groups))
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    xhat = ((xg - mu) / np.sqrt(var + eps)).reshape(x.shape)
    return scale * xhat + shift


def group_norm_vjp(x: Tensor, groups: int, scale: Tensor, g: Tensor, eps: float = 1e-5):
    e = x.shape[-1]
    n = e // groups
    xg = x.reshape(x.shape[:-1] + (groups, n))
    mu = xg.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=-1, keepdims=True) + eps)
    xhat_g = (xg - mu) * inv
    xhat = xhat_g.reshape(x.shape)
    lead = tuple(range(x.ndim - 1))
    dscale = (g * xhat).sum(axis=lead)
    dshift = g.sum(axis=lead)
    gx = (g * scale).reshape(xg.shape)
    dxg = inv * (gx - gx.mean(axis=-1, keepdims=True)
                 - xhat_g * (gx * xhat_g).mean(axis=-1, keepdims=True))
    return dxg.reshape(x.shape), dscale, dshift


# ---------------------------------------------------------------- losses

def loss_clf(y: float, y_hat: float) -> float:
    p = min(max(float(y_hat), EPS), 1.0 - EPS)
    y = float(y)
    return -y * math.log(p) - (1.0 - y) * math.log(1.0 - p)


def loss_seg(m: Tensor, m_hat: Tensor) -> float:
    m = np.asarray(m, dtype=np.float64)
    m_hat = np.asarray(m_hat, dtype=np.float64)
    if m.shape != m_hat.shape:
        raise DimensionError(f"mask {m.shape} vs prediction {m_hat.shape}")
    p = np.clip(m_hat, EPS, 1.0 - EPS)
    return float(np.mean(-m * np.log(p) - (1.0 - m) * np.log1p(-p)))


def loss_total(l_clf: float, l_seg: float, lambda_clf: float) -> float:
    return lambda_clf * l_clf + l_seg


# ---------------------------------------------------------------- forward

def _layer_forward(x: Tensor, mask, lp: LayerParams, config: EmatConfig,
                   meter: Optional[AllocationMeter], layers_cache: list) -> Tensor:
    emb = pointwise_linear(x, lp.embed_w, lp.embed_b)
    qp = pointwise_linear(emb, lp.q_w, lp.q_b)
    q_d = downscale(qp, lp.down)
    scale = (q_d.shape[-1] // config.heads) ** -0.5 if config.logit_scale else 1.0
    q_att = q_d * scale if scale != 1.0 else q_d
    att = multi_head_masked_attention(q_att, emb, mask, config.heads, lp.attn, meter)
    r = q_d + att
    if config.feed_forward:
        gn_out = group_norm(r, config.heads, lp.gn_scale, lp.gn_shift)
        a1 = pointwise_linear(gn_out, lp.ff1_w, lp.ff1_b)
        f1 = silu(a1)
        x_out = r + pointwise_linear(f1, lp.ff2_w, lp.ff2_b)
    else:
        gn_out = a1 = f1 = None
        x_out = r
    layers_cache.append({"x_in": x, "emb": emb, "qp": qp, "q_d": q_d, "q_att": q_att,
                         "scale": scale, "r": r, "gn_out": gn_out, "a1": a1, "f1": f1})
    return x_out


def forward_cached(support: TokenStack, support_mask: Tensor, query: TokenStack,
                   params: EmatParams, config: EmatConfig,
                   meter: Optional[AllocationMeter] = None):
    """Binary forward pass returning (class probability, pixel scores, cache)."""
    c = support.layers * support.heads
    if c != config.correlation_channels:
        raise DimensionError(
            f"token stack provides {c} correlation channels, config expects "
            f"{config.correlation_channels}")
    support_mask = np.asarray(support_mask)
    if support_mask.shape != (support.image_h, support.image_w):
        raise DimensionError(
            f"support mask {support_mask.shape} vs image "
            f"({support.image_h}, {support.image_w})")

    corr = build_correlation(support, query, config.grids[0],
                             clamp_negative=config.clamp_negative)
    masks = [prepare_mask(support_mask, config.grids[0]),
             prepare_mask(support_mask, config.grids[1])]
    x = corr.values
    cache = {"masks": masks, "layers": [], "t_s_flow": [x.shape[0]], "t_d_flow": []}
    for li, lp in enumerate(params.layers):
        x = _layer_forward(x, masks[li], lp, config, meter, cache["layers"])
        cache["t_s_flow"].append(x.shape[0])
        cache["t_d_flow"].append(cache["layers"][li]["q_d"].shape[0])

    # row 0: pooled image token trajectory; row 1: class token trajectory
    img, cls = x[0], x[1]
    t_q = x.shape[1]
    clf, seg = params.clf, params.seg
    a1 = pointwise_linear(cls, clf.w1, clf.b1)
    s1 = silu(a1)
    a2 = pointwise_linear(s1, clf.w2, clf.b2)
    s2 = silu(a2)
    pooled = s2.mean(axis=0)
    z = float(pooled @ clf.w3[0] + clf.b3[0])
    prob = float(sigmoid(np.asarray(z)))

    qh, qw = query.grid
    grid = img.reshape(qh, qw, -1)
    b1 = pointwise_linear(grid, seg.w1, seg.b1)
    t1 = silu(b1)
    b2 = pointwise_linear(t1, seg.w2, seg.b2)
    up = bilinear_resize(b2, query.image_h, query.image_w)[..., 0]
    p_pix = sigmoid(up)

    cache["head"] = {"cls": cls, "a1": a1, "s1": s1, "a2": a2, "pooled": pooled,
                     "grid": grid, "b1": b1, "t1": t1, "t_q": t_q, "grid_hw": (qh, qw)}
    return prob, p_pix, cache


def forward_1way(support: TokenStack, support_mask: Tensor, query: TokenStack,
                 params: EmatParams, config: EmatConfig,
                 meter: Optional[AllocationMeter] = None):
    prob, p_pix, _ = forward_cached(support, support_mask, query, params, config, meter)
    return prob, p_pix


# ---------------------------------------------------------------- backward

def loss_and_param_gradients(support: TokenStack, support_mask: Tensor, query: TokenStack,
                             y: float, m_gt: Tensor, params: EmatParams, config: EmatConfig,
                             loss_only: bool = False):
    """Total loss and its gradient w.r.t. every trainable tensor (flatten() names)."""
    prob, p_pix, cache = forward_cached(support, support_mask, query, params, config)
    m = np.asarray(m_gt, dtype=np.float64)
    total = loss_total(loss_clf(y, prob), loss_seg(m, p_pix), config.lambda_clf)
    if loss_only:
        return total

    grads: Dict[str, Tensor] = {}
    clf, seg = params.clf, params.seg
    hc = cache["head"]
    t_q = hc["t_q"]

    # classification head: d(loss)/d(logit) = lambda * (p - y) while the clamp is inactive
    dz = config.lambda_clf * (prob - float(y)) if EPS < prob < 1.0 - EPS else 0.0
    grads["clf.w3"] = (dz * hc["pooled"])[None, :]
    grads["clf.b3"] = np.array([dz], dtype=hc["pooled"].dtype)
    ds2 = np.repeat(((dz / t_q) * clf.w3[0])[None, :], t_q, axis=0)
    da2 = ds2 * silu_grad(hc["a2"])
    ds1, grads["clf.w2"], grads["clf.b2"] = pointwise_linear_vjp(hc["s1"], clf.w2, da2)
    da1 = ds1 * silu_grad(hc["a1"])
    dcls, grads["clf.w1"], grads["clf.b1"] = pointwise_linear_vjp(hc["cls"], clf.w1, da1)

    # segmentation head: mean pixel BCE, same clamp gating per pixel
    pp = np.asarray(p_pix, dtype=np.float64)
    gate = (pp > EPS) & (pp < 1.0 - EPS)
    dzpix = np.where(gate, (pp - m) / pp.size, 0.0)
    qh, qw = hc["grid_hw"]
    g_b2 = bilinear_resize_backward(dzpix[..., None], qh, qw)
    g_t1, grads["seg.w2"], grads["seg.b2"] = pointwise_linear_vjp(hc["t1"], seg.w2, g_b2)
    g_b1 = g_t1 * silu_grad(hc["b1"])
    g_grid, grads["seg.w1"], grads["seg.b1"] = pointwise_linear_vjp(hc["grid"], seg.w1, g_b1)
    dimg = g_grid.reshape(t_q, -1)

    dx = np.stack([dimg, dcls])
    for li in (1, 0):
        lp, lc = params.layers[li], cache["layers"][li]
        pre = f"layers.{li}."
        if config.feed_forward:
            g_f1, grads[pre + "ff2_w"], grads[pre + "ff2_b"] = \
                pointwise_linear_vjp(lc["f1"], lp.ff2_w, dx)
            g_a1 = g_f1 * silu_grad(lc["a1"])
            g_gn, grads[pre + "ff1_w"], grads[pre + "ff1_b"] = \
                pointwise_linear_vjp(lc["gn_out"], lp.ff1_w, g_a1)
            g_r_norm, grads[pre + "gn_scale"], grads[pre + "gn_shift"] = \
                group_norm_vjp(lc["r"], config.heads, lp.gn_scale, g_gn)
            g_r = dx + g_r_norm
        else:
            for n in ("ff1_w", "ff1_b", "ff2_w", "ff2_b", "gn_scale", "gn_shift"):
                grads[pre + n] = np.zeros_like(getattr(lp, n))
            g_r = dx
        g_qd_att, g_emb_att, at = multi_head_attention_vjp(
            lc["q_att"], lc["emb"], cache["masks"][li], config.heads, lp.attn, g_r)
        for name, val in at.items():
            grads[pre + "attn." + name] = val
        g_qd = g_r + lc["scale"] * g_qd_att
        g_qp, dn = downscale_vjp(lc["qp"], lp.down, g_qd)
        for name, val in dn.items():
            grads[pre + "down." + name] = val
        g_emb_q, grads[pre + "q_w"], grads[pre + "q_b"] = \
            pointwise_linear_vjp(lc["emb"], lp.q_w, g_qp)
        g_emb = g_emb_att + g_emb_q
        dx, grads[pre + "embed_w"], grads[pre + "embed_b"] = \
            pointwise_linear_vjp(lc["x_in"], lp.embed_w, g_emb)
    return float(total), grads


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: EmatParams, config: EmatConfig) -> None:
    """One JSON header line (tensor table + config hash), then f32 LE blobs in order."""
    flat = params.flatten()
    header = {"format_version": 1, "config_hash": config.config_hash(),
              "tensors": [{"name": n, "shape": list(a.shape)} for n, a in flat.items()]}
    blobs = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in flat.values())
    atomic_write_bytes(path, json.dumps(header, separators=(",", ":")).encode() + b"\n" + blobs)


def load_checkpoint(path, config: EmatConfig) -> EmatParams:
    with open(path, "rb") as f:
        data = f.read()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing checkpoint header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad checkpoint header ({exc})") from exc
    if header.get("format_version") != 1:
        raise FormatError(f"{path}: unsupported format_version {header.get('format_version')!r}")
    if header.get("config_hash") != config.config_hash():
        raise ValidationError(
            f"{path}: checkpoint config hash {header.get('config_hash')!r} does not match "
            f"current config {config.config_hash()!r}")
    params = init_params(config, seed=0)
    flat = params.flatten()
    table = header.get("tensors", [])
    if [t["name"] for t in table] != list(flat):
        raise FormatError(f"{path}: tensor table does not match this config's layout")
    offset = nl + 1
    for rec in table:
        target = flat[rec["name"]]
        if tuple(rec["shape"]) != target.shape:
            raise FormatError(
                f"{path}: tensor {rec['name']} has shape {rec['shape']}, "
                f"expected {list(target.shape)}")
        nbytes = 4 * target.size
        chunk = data[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: truncated at tensor {rec['name']}")
        target[...] = np.frombuffer(chunk, dtype="<f4").reshape(target.shape)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes after tensor data")
    return params


# ---------------------------------------------------------------- N-way protocol

@dataclass
class Prediction:
    query_id: str
    class_ids: List[int]
    class_logits: Tensor     # per-class probabilities, shot-averaged
    mask_scores: Tensor      # [N, H, W] per-class pixel scores
    label_vector: Tensor     # [N] in {0,1}
    seg_mask: Tensor         # [H, W] in {0..N}; 0 is background
    delta: float


def decide(class_probs: Tensor, mask_scores: Tensor, delta: float):
    """Threshold class probabilities; per pixel, best class above delta or background."""
    probs = np.asarray(class_probs, dtype=np.float64)
    scores = np.asarray(mask_scores)
    if probs.ndim != 1 or scores.ndim != 3 or scores.shape[0] != probs.shape[0]:
        raise DimensionError(f"probs {probs.shape} vs scores {scores.shape}")
    labels = (probs > delta).astype(np.int8)
    best = np.argmax(scores, axis=0)  # ties resolve to the lowest class index
    best_score = np.take_along_axis(scores, best[None], axis=0)[0]
    seg = np.where(best_score > delta, best.astype(np.int32) + 1, 0).astype(np.int32)
    return labels, seg


def _shot_key(shot) -> Tuple[str, str]:
    digest = hashlib.sha1(np.ascontiguousarray(shot.mask).tobytes()).hexdigest()
    return (str(shot.image_id), digest)


def infer_multiway(episode, token_lookup: Callable[[str], TokenStack],
                   params: EmatParams, config: EmatConfig,
                   meter: Optional[AllocationMeter] = None) -> Prediction:
    """Run the binary model per shot, average per class, then decide jointly.

    Shots are processed in a canonical order so the result is independent of
    the order the episode happens to list them in.
    """
    query = token_lookup(episode.query_id)
    n = len(episode.class_ids)
    probs = np.zeros(n, dtype=np.float64)
    scores = []
    for idx, cid in enumerate(episode.class_ids):
        shots = sorted(episode.support[cid], key=_shot_key)
        if not shots:
            raise ValidationError(f"class {cid} has no support shots")
        acc_p, acc_s = 0.0, None
        for shot in shots:
            p, s = forward_1way(token_lookup(shot.image_id), shot.mask, query,
                                params, config, meter)
            acc_p += p
            acc_s = s if acc_s is None else acc_s + s
        probs[idx] = acc_p / len(shots)
        scores.append(acc_s / len(shots))
    mask_scores = np.stack(scores)
    labels, seg = decide(probs, mask_scores, config.delta)
    return Prediction(query_id=episode.query_id, class_ids=list(episode.class_ids),
                      class_logits=probs, mask_scores=mask_scores,
                      label_vector=labels, seg_mask=seg, delta=config.delta)
