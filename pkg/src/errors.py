"""
ampost - Error Types

Every failure the library raises derives from AmpostError so the CLI can
report it uniformly and exit non-zero.
"""

from typing import Optional


class AmpostError(Exception):
    """Base class for all ampost errors."""


class ShapeError(AmpostError, ValueError):
    """Raised when tensor shapes do not conform for an operation."""


class NonFiniteError(AmpostError, ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class GraphError(AmpostError):
    """Raised for malformed autodiff graphs (cycles, non-scalar roots)."""


class ContainerError(AmpostError):
    """Raised when a binary container is malformed or truncated."""


class ConfigError(AmpostError):
    """Raised for unknown configuration keys or unparsable values."""


class ScheduleError(AmpostError, ValueError):
    """Raised for diffusion times outside the schedule or degenerate coefficients."""


class OperatorError(AmpostError, ValueError):
    """Raised for malformed forward-operator specs or mismatched dimensions."""


class SolverError(AmpostError):
    """Raised when the ODE solver fails to converge."""


class OracleError(AmpostError):
    """Raised when an analytic oracle cannot be formed (e.g. singular covariance)."""


class DivergenceError(AmpostError):
    """
    Raised when a training loss becomes non-finite.

    Attributes:
        term: Name of the loss term that went non-finite
        step: Optimizer step at which it happened
    """

    def __init__(self, message: str, term: Optional[str] = None, step: Optional[int] = None) -> None:
        super().__init__(message)
        self.term = term
        self.step = step
