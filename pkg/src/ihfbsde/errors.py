"""Exception types shared by the solver modules."""

from __future__ import annotations


class IhfbsdeError(Exception):
    """Base class for all errors raised by the package."""


class ShapeError(IhfbsdeError, ValueError):
    """Arrays do not share the expected path count, grid length or dimensions."""


class ValidationError(IhfbsdeError, ValueError):
    """Input data violates a structural requirement (symmetry, dimensions, ...)."""


class ConfigurationError(IhfbsdeError, ValueError):
    """A run or noise configuration cannot be realised."""


class AssumptionError(IhfbsdeError, ValueError):
    """A gap or positivity condition that a solver relies on is violated."""


class StepSizeError(IhfbsdeError):
    """The implicit backward step cannot contract for the chosen time step."""

    def __init__(self, message: str, suggested_dt: float):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class ComparabilityError(IhfbsdeError, ValueError):
    """Two results were produced on different noise and cannot be compared."""


class NonConvergenceError(IhfbsdeError):
    """An iteration stopped without meeting its tolerance.

    ``trace`` holds whatever diagnostic history the iteration recorded.
    """

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class ConvergenceError(NonConvergenceError):
    """The truncation schedule was exhausted before the distances fell below tol."""


class DivergenceError(IhfbsdeError):
    """A forward simulation produced non-finite values."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class ContinuationError(NonConvergenceError):
    """Continuation stopped early; carries the last level reached and its solution."""

    def __init__(self, message: str, last_alpha: float, theta=None, state=None):
        super().__init__(message, trace=getattr(state, "level_trace", None))
        self.last_alpha = last_alpha
        self.theta = theta
        self.state = state


class TransformError(IhfbsdeError):
    """The linear game reduction is not valid for the given data."""


class LiftError(IhfbsdeError):
    """The lifted adjoints do not reproduce the reduced forward variable."""
