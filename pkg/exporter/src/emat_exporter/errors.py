"""Exporter error type."""


class ExporterError(Exception):
    """Model loading, image validation, or serialization failure."""
