"""Frozen ViT feature exporter: per-layer, per-head token files."""

__version__ = "0.1.0"
