"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError (and subclasses) -> 3, NumericError -> 4.
"""


class ShapeError(ValueError):
    """A tensor operation received inconsistently shaped arguments."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or out of range."""

    def __init__(self, message, field=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class DataError(ValueError):
    """A dataset violates its contract (missing files, bad labels, ...)."""


class FormatError(DataError):
    """A serialized artifact is corrupt or does not match its schema."""


class NumericError(ArithmeticError):
    """A computation produced values outside its numeric domain."""
