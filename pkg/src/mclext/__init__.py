"""Onset-prompted multi-channel target speaker extraction.

The enrollment utterance is prepended to every mixture channel and a
time-frequency grid network extracts the speaker heard first.
"""
from .errors import ConfigError, DataError, MclextError, NumericalError, ShapeError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "MclextError", "NumericalError", "ShapeError", "__version__"]
