"""Exception hierarchy shared across the package."""


class BayesRppgError(Exception):
    """Base class for all package errors."""


class ShapeError(BayesRppgError):
    """Tensor dimensions incompatible with the requested operation."""


class ConfigError(BayesRppgError):
    """Invalid configuration value, unknown key, or out-of-range setting."""


class DegenerateInputError(BayesRppgError):
    """Input carries no usable information (e.g. constant signal)."""


class ExtrapolationError(BayesRppgError):
    """Interpolation was requested outside the supported time range."""


class CorruptDatasetError(BayesRppgError):
    """On-disk dataset record does not match its declared header."""


class UndefinedCorrelationError(BayesRppgError):
    """Correlation undefined because one input vector is constant."""


class GradCheckError(BayesRppgError):
    """Gradient verification hit non-finite values."""


class TrainingError(BayesRppgError):
    """Training step failed (non-finite loss or gradient)."""
