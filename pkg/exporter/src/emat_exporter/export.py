"""Export jobs: run the frozen backbone on images and emit token files.

The token-file layout (one JSON header line, then little-endian f32 image
tokens ordered [layer][head][row][col][dim] followed by class tokens
[layer][head][dim]) is the consumer contract; this writer is independent of
the consuming library.
"""

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from PIL import Image

from .errors import ExporterError
from .vit import load_backbone


@dataclass
class ExportJob:
    image_paths: Sequence[str]
    out_dir: str
    model_id: str = "synthetic-vits"
    image_size: int = 224

    def __post_init__(self):
        if self.image_size < 1:
            raise ExporterError(f"image size {self.image_size} must be positive")


def _atomic_write(path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_token_file(path, image_tokens: np.ndarray, class_token: np.ndarray,
                     patch_size: int, image_h: int, image_w: int,
                     provenance: dict) -> None:
    """image_tokens: [layers, heads, h, w, d]; class_token: [layers, heads, d]."""
    layers, heads, h, w, d = image_tokens.shape
    header = {"format_version": 1, "layers": layers, "heads": heads,
              "head_dim": d, "h": h, "w": w, "patch_size": patch_size,
              "image_h": image_h, "image_w": image_w,
              "endianness": "little", "dtype": "f32", **provenance}
    body = np.ascontiguousarray(image_tokens, dtype="<f4").tobytes() \
        + np.ascontiguousarray(class_token, dtype="<f4").tobytes()
    _atomic_write(path, json.dumps(header, separators=(",", ":")).encode() + b"\n" + body)


def load_image(path, size: int) -> np.ndarray:
    """Read, convert to RGB, bilinear-resize to size x size, scale to [0, 1]."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB").resize((size, size), Image.BILINEAR)
    except (OSError, ValueError) as exc:
        raise ExporterError(f"cannot read image {path}: {exc}") from exc
    return np.asarray(img, dtype=np.float64) / 255.0


def _split_heads(block_outputs: np.ndarray, grid, heads: int, head_dim: int):
    """[depth, tokens, embed] -> ([depth, heads, h, w, d], [depth, heads, d])."""
    depth, tokens, embed = block_outputs.shape
    gh, gw = grid
    if embed != heads * head_dim or tokens != gh * gw + 1:
        raise ExporterError(
            f"backbone output {block_outputs.shape} inconsistent with "
            f"{heads} heads x {head_dim} dims on a {gh}x{gw} grid")
    per_head = block_outputs.reshape(depth, tokens, heads, head_dim)
    cls = np.ascontiguousarray(per_head[:, 0].transpose(0, 2, 1).reshape(
        depth, heads, head_dim))
    img = np.ascontiguousarray(per_head[:, 1:].transpose(0, 2, 1, 3).reshape(
        depth, heads, gh, gw, head_dim))
    return img, cls


def export(job: ExportJob) -> List[str]:
    """Run the backbone on every image; one token file per image. Returns paths."""
    backbone = load_backbone(job.model_id)
    info = backbone.info()
    if job.image_size % info.patch:
        raise ExporterError(
            f"target size {job.image_size} not divisible by patch {info.patch} "
            f"of model {job.model_id!r}")
    os.makedirs(job.out_dir, exist_ok=True)
    provenance = {"model": info.model_id, "resize": "bilinear"}
    written = []
    for path in job.image_paths:
        image = load_image(path, job.image_size)
        outputs, grid = backbone.forward(image)
        img_tokens, cls_tokens = _split_heads(outputs, grid, info.heads, info.head_dim)
        stem = os.path.splitext(os.path.basename(path))[0]
        out_path = os.path.join(job.out_dir, f"{stem}.tokens")
        write_token_file(out_path, img_tokens, cls_tokens, info.patch,
                         job.image_size, job.image_size, provenance)
        written.append(out_path)
    return written
