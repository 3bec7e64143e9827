"""Exception types raised across the toolkit."""


class ImuMatchError(Exception):
    """Base class for all toolkit errors."""


class DegenerateInputError(ImuMatchError, ValueError):
    """Input is too short or too small for the requested operation."""


class ShapeError(ImuMatchError, ValueError):
    """Array or window dimensions do not match the model."""


class NumericFailure(ImuMatchError, FloatingPointError):
    """NaN or Inf appeared where finite values are required."""


class StateError(ImuMatchError, RuntimeError):
    """An object was used in a state that does not permit the call."""


class OrderingError(ImuMatchError, ValueError):
    """Scores arrived out of step order for one (track, sensor) pair."""


class ConfigError(ImuMatchError, ValueError):
    """Configuration value is missing, unknown or invalid."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class DataFormatError(ImuMatchError, ValueError):
    """An input file does not follow its documented format."""
