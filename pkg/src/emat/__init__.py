"""Efficient masked attention transformer: correlation-transformer library and CLI."""

__version__ = "0.1.0"
