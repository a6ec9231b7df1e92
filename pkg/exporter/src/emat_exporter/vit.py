"""Deterministic frozen ViT backbone in numpy.

The default "synthetic-vits" backbone reproduces the ViT-S architecture
(12 blocks, 6 heads, embed 384, patch 14) with seeded frozen weights, so
exports are byte-reproducible without downloading a checkpoint. Collected
features are each block's *output* tokens, sliced per head.
"""

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ExporterError

VIT_S = {"patch": 14, "embed": 384, "depth": 12, "heads": 6, "mlp_ratio": 4}
_INIT_STD = 0.02


@dataclass(frozen=True)
class BackboneInfo:
    model_id: str
    patch: int
    depth: int
    heads: int
    head_dim: int


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def _layer_norm(x, scale, shift, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + shift


class SyntheticViT:
    """ViT-S forward pass over frozen seeded weights."""

    def __init__(self, model_id: str, arch=VIT_S):
        self.model_id = model_id
        self.patch = arch["patch"]
        self.embed = arch["embed"]
        self.depth = arch["depth"]
        self.heads = arch["heads"]
        self.head_dim = self.embed // self.heads
        self._seed = zlib.crc32(model_id.encode("utf-8"))
        r = np.random.default_rng([self._seed, 1])
        d, hidden = self.embed, arch["mlp_ratio"] * arch["embed"]
        self.w_patch = r.normal(0, _INIT_STD, (d, 3 * self.patch * self.patch))
        self.b_patch = np.zeros(d)
        self.cls = r.normal(0, _INIT_STD, d)
        self.blocks = []
        for _ in range(self.depth):
            self.blocks.append({
                "ln1_s": np.ones(d), "ln1_b": np.zeros(d),
                "w_qkv": r.normal(0, _INIT_STD, (3 * d, d)), "b_qkv": np.zeros(3 * d),
                "w_proj": r.normal(0, _INIT_STD, (d, d)), "b_proj": np.zeros(d),
                "ln2_s": np.ones(d), "ln2_b": np.zeros(d),
                "w_fc1": r.normal(0, _INIT_STD, (hidden, d)), "b_fc1": np.zeros(hidden),
                "w_fc2": r.normal(0, _INIT_STD, (d, hidden)), "b_fc2": np.zeros(d),
            })

    def info(self) -> BackboneInfo:
        return BackboneInfo(model_id=self.model_id, patch=self.patch,
                            depth=self.depth, heads=self.heads,
                            head_dim=self.head_dim)

    def _pos_embedding(self, n_tokens: int):
        # lazily seeded per grid size, so any square extent is deterministic
        r = np.random.default_rng([self._seed, 2, n_tokens])
        return r.normal(0, _INIT_STD, (n_tokens, self.embed))

    def forward(self, image: np.ndarray):
        """image: [H, W, 3] float in [0, 1], H == W, divisible by the patch size.

        Returns (block_outputs [depth, tokens, embed], grid (h, w)); token 0 is
        the class token.
        """
        h_px, w_px, ch = image.shape
        if ch != 3 or h_px % self.patch or w_px % self.patch:
            raise ExporterError(
                f"image extent {h_px}x{w_px}x{ch} not divisible by patch {self.patch}")
        gh, gw = h_px // self.patch, w_px // self.patch
        x = (image.astype(np.float64) - 0.5) / 0.5
        patches = (x.reshape(gh, self.patch, gw, self.patch, 3)
                    .transpose(0, 2, 1, 3, 4).reshape(gh * gw, -1))
        tokens = patches @ self.w_patch.T + self.b_patch
        tokens = np.concatenate([self.cls[None, :], tokens], axis=0)
        tokens = tokens + self._pos_embedding(tokens.shape[0])

        outputs = np.empty((self.depth, tokens.shape[0], self.embed))
        for li, blk in enumerate(self.blocks):
            tokens = tokens + self._attention(_layer_norm(tokens, blk["ln1_s"],
                                                          blk["ln1_b"]), blk)
            y = _layer_norm(tokens, blk["ln2_s"], blk["ln2_b"])
            y = _gelu(y @ blk["w_fc1"].T + blk["b_fc1"]) @ blk["w_fc2"].T + blk["b_fc2"]
            tokens = tokens + y
            outputs[li] = tokens
        return outputs, (gh, gw)

    def _attention(self, x, blk):
        n, d = x.shape
        qkv = (x @ blk["w_qkv"].T + blk["b_qkv"]).reshape(n, 3, self.heads, self.head_dim)
        q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]       # each [n, heads, head_dim]
        scores = np.einsum("nhd,mhd->hnm", q, k) / np.sqrt(self.head_dim)
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        out = np.einsum("hnm,mhd->nhd", w, v).reshape(n, d)
        return out @ blk["w_proj"].T + blk["b_proj"]


def load_backbone(model_id: str):
    """Resolve a model identifier to a backbone with a .forward(image) method."""
    if model_id.startswith("hf:"):
        return _load_hf_backbone(model_id)
    if model_id == "synthetic-vits":
        return SyntheticViT(model_id)
    raise ExporterError(f"unknown model {model_id!r}; use 'synthetic-vits' or 'hf:<repo>'")


class _HfViT:
    """Thin hook onto a torch/transformers ViT checkpoint (no register tokens)."""

    def __init__(self, model_id: str):
        repo = model_id[len("hf:"):]
        try:
            import torch
            from transformers import AutoConfig, AutoModel
            config = AutoConfig.from_pretrained(repo)
            self._model = AutoModel.from_pretrained(repo).eval()
            self._torch = torch
        except Exception as exc:  # missing deps, offline hub, bad repo id
            raise ExporterError(f"failed to load model {model_id!r}: {exc}") from exc
        self.model_id = model_id
        self.patch = int(config.patch_size)
        self.depth = int(config.num_hidden_layers)
        self.heads = int(config.num_attention_heads)
        self.head_dim = int(config.hidden_size) // self.heads

    def info(self) -> BackboneInfo:
        return BackboneInfo(model_id=self.model_id, patch=self.patch,
                            depth=self.depth, heads=self.heads,
                            head_dim=self.head_dim)

    def forward(self, image: np.ndarray):
        h_px, w_px, _ = image.shape
        if h_px % self.patch or w_px % self.patch:
            raise ExporterError(
                f"image extent {h_px}x{w_px} not divisible by patch {self.patch}")
        torch = self._torch
        x = torch.from_numpy(((image - 0.5) / 0.5).transpose(2, 0, 1)[None]).float()
        with torch.no_grad():
            out = self._model(pixel_values=x, output_hidden_states=True)
        # hidden_states[0] is the embedding layer; the rest are block outputs
        stacked = [hs[0].numpy().astype(np.float64) for hs in out.hidden_states[1:]]
        return np.stack(stacked), (h_px // self.patch, w_px // self.patch)


def _load_hf_backbone(model_id: str):
    return _HfViT(model_id)
