"""Exception types shared across the package.

The CLI maps each of these to its own exit code.
"""


class FunError(Exception):
    """Base class for all errors raised by funnet."""


class DimensionError(FunError, ValueError):
    """Array or image extents are incompatible with an operation."""


class SpecError(FunError, ValueError):
    """A compression spec or architecture spec is out of range."""


class ConfigError(FunError, ValueError):
    """Mismatched model, weights or data configuration."""


class DatasetError(FunError):
    """A dataset could not be built or read."""


class DivergenceError(FunError, ArithmeticError):
    """Training produced a non-finite loss."""


class DegenerateScaleError(SpecError):
    """Compound scaling collapsed a width or depth to zero."""
