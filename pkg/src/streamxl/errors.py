"""Exception types shared across the package."""


class StreamXLError(Exception):
    """Base class for library errors."""


class DimensionError(StreamXLError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(StreamXLError, ValueError):
    """An invalid configuration value or combination."""


class NumericalError(StreamXLError, ArithmeticError):
    """A degenerate numeric state: fully-masked rows, NaN losses, non-determinism."""


class FormatError(StreamXLError, ValueError):
    """A model or feature file is malformed, truncated, or of the wrong version."""
