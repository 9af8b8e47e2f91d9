class AnoDFDError(Exception):
    pass


class ConfigError(AnoDFDError, ValueError):
    """Invalid shapes, hyperparameters or configuration values."""


class UsageError(AnoDFDError, ValueError):
    """A call violated a documented precondition."""


class NumericError(AnoDFDError, ArithmeticError):
    """NaN or Inf appeared where finite values are required."""


class ValidationError(AnoDFDError, ValueError):
    """Data on disk or in memory breaks an invariant (e.g. non-binary mask)."""


class DataIOError(AnoDFDError, OSError):
    """Missing or unreadable file; the message names the path."""
