"""Exceptions raised across lagflow."""
from typing import Optional


class LagflowError(Exception):
    """Base class for every error raised by lagflow."""


class InvalidInputError(LagflowError, ValueError):
    """An argument violates the documented preconditions."""


class UnsupportedRegimeError(LagflowError):
    """The requested scheme is not defined for the field's Sobolev exponent."""


class RoughFieldError(LagflowError):
    """A classical integrator was requested for a field without Lipschitz bounds."""


class CapacityError(LagflowError):
    """The exact transport solver was given more atoms than it accepts."""


class ConvergenceError(LagflowError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message: str, violation: Optional[float] = None, iterations: Optional[int] = None):
        super().__init__(message)
        self.violation = violation
        self.iterations = iterations


class MeshConstructionError(LagflowError):
    """A mesh could not be built as a partition of the torus."""


class EmptyCellError(LagflowError):
    """Density-proportional sampling was requested in a cell with zero mass."""


class ConfigError(LagflowError):
    """An experiment configuration does not match the schema."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key
