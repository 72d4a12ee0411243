"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes (see ``mclext.cli``).
"""


class MclextError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(MclextError, ValueError):
    """Invalid configuration value or inconsistent hyperparameters."""


class ShapeError(MclextError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class DataError(MclextError, ValueError):
    """Bad input data: misaligned signals, unreadable WAVs, missing manifests."""


class NumericalError(MclextError, ArithmeticError):
    """Non-finite values or failed gradient checks."""
