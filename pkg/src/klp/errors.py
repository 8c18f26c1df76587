"""Shared exception types.

Module-specific errors subclass :class:`KlpError` so callers can catch
everything this package raises with one except clause.
"""


class KlpError(Exception):
    """Base class for all errors raised by this package."""


class InputFormatError(KlpError):
    """A data file violates its declared line-delimited format."""


class DimensionMismatchError(KlpError):
    """Vectors or matrices disagree on embedding dimension."""


class DegenerateInputError(KlpError):
    """An input is mathematically unusable (zero vector, empty text, ...)."""


class ConfigError(KlpError):
    """A configuration file or value failed validation."""
