"""Exception hierarchy shared across the package.

Exit-code mapping for the CLI: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class Sweep4dError(Exception):
    pass


class ConfigError(Sweep4dError):
    """Invalid or inconsistent configuration."""


class DataError(Sweep4dError):
    """Malformed files, inconsistent geometry, or bad payloads."""


class NumericError(Sweep4dError):
    """Numerical failure (divergence, NaN propagation)."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state
