"""Error types shared across the package."""


class EmatError(Exception):
    """Base class for all package errors."""


class DimensionError(EmatError):
    """Shapes or extents do not line up."""


class ValidationError(EmatError):
    """Values violate a declared invariant (non-binary mask, bad header, ...)."""


class ConfigError(EmatError):
    """Inconsistent or unsupported configuration."""


class NumericError(EmatError):
    """A computation produced a non-finite value where finiteness is required."""


class SamplingError(EmatError):
    """The annotation pool cannot support the requested episode."""


class FormatError(EmatError):
    """A file does not conform to its declared format."""
