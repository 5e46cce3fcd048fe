"""Exception hierarchy. Each family maps onto a CLI exit code."""


class KwsError(Exception):
    exit_code = 1


class ConfigError(KwsError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(KwsError, ValueError):
    """Unreadable, malformed or unusable input data."""

    exit_code = 3


class DivergenceError(KwsError, ArithmeticError):
    """Non-finite values appeared during a forward or backward pass."""

    exit_code = 4

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer
