"""Streaming keyword spotting with a gated dilated-convolution detector."""

from wavekws.errors import ConfigError, DataError, DivergenceError, KwsError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "DivergenceError", "KwsError", "__version__"]
