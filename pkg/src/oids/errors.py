"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Library-level precondition violations raise plain
ValueError and are treated as data errors at the boundary.
"""


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


class DataError(Exception):
    """Unreadable, malformed, or mutually inconsistent input artifacts."""


class NumericError(RuntimeError):
    """Non-finite loss or other numeric breakdown during optimization."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ObjectInvisibleError(ValueError):
    """An object has no visible pixels in any view, so 2D pooling is undefined."""
