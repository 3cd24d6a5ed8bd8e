"""Exception types shared across the package."""


class TITError(Exception):
    """Base class for every error raised by titrl."""


class ShapeError(TITError, ValueError):
    """Operand shapes are incompatible."""


class NumericalError(TITError, ArithmeticError):
    """A computation produced NaN/Inf or an empty attention context."""


class ConfigError(TITError, ValueError):
    """A configuration value is unknown, mistyped or violates a constraint."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class CheckpointError(TITError, OSError):
    """A weight file or checkpoint is missing, corrupt or mismatched."""
