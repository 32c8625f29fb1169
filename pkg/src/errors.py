class DiitError(Exception):
    """Base class for every error raised by the lab."""


class DimensionError(DiitError):
    """Shapes of two operands do not agree."""


class NonFiniteError(DiitError):
    """A tensor or loss value is NaN or infinite."""


class DataError(DiitError):
    """Invalid ids, malformed rows, empty datasets, out-of-range indices."""


class ConfigError(DiitError):
    """Configuration failed validation. The message carries the key path."""


class CheckpointError(DiitError):
    """A checkpoint is missing, corrupt or of an unknown format version."""


class FreezeViolation(DiitError):
    """A parameter group that should be frozen changed during an update."""
