"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class AttnmineError(Exception):
    """Base class for all package errors."""


class ShapeError(AttnmineError):
    """Operands or rasters have incompatible dimensions."""


class ConfigError(AttnmineError):
    """Invalid configuration value or unknown configuration key."""


class DataError(AttnmineError):
    """Bad or missing input data (files, manifests, datasets)."""


class BadMagicError(DataError):
    """A binary file does not start with the expected magic bytes."""


class TruncatedFileError(DataError):
    """A binary file ends before its declared payload is complete."""


class NanPayloadError(DataError):
    """A binary payload contains non-finite values."""


class InvalidMapError(DataError):
    """An attention map or mask violates its invariants."""


class DegenerateMapError(InvalidMapError):
    """An all-zero map cannot be normalized into a distribution."""


class NumericError(AttnmineError):
    """A numeric failure (non-finite loss, invalid scalar domain)."""


class UndefinedCorrelationError(NumericError):
    """Pearson correlation is undefined for constant inputs."""


class PixelBudgetError(AttnmineError):
    """A dense attention plane exceeds the configured pixel budget."""
