"""Exception hierarchy shared by every gmc module.

Each error also derives from the closest builtin so callers may catch either.
"""

from typing import Optional


class GMCError(Exception):
    """Base class for all toolkit errors."""


class KernelDomainError(GMCError, ValueError):
    """Kernel evaluated where it is undefined (diagonal of a log kernel, boundary points)."""


class OpenQuestionError(GMCError, NotImplementedError):
    """Requested construction whose validity is unresolved."""


class NumericalError(GMCError, ArithmeticError):
    """A numerical routine failed to reach its tolerance."""

    def __init__(self, message: str, achieved: Optional[float] = None):
        super().__init__(message)
        self.achieved = achieved


class NotPositiveDefiniteError(NumericalError):
    """Covariance matrix could not be factored even after the jitter ladder."""

    def __init__(self, message: str, min_eigenvalue: float):
        super().__init__(message, achieved=min_eigenvalue)
        self.min_eigenvalue = min_eigenvalue


class GridSizeError(GMCError, ValueError):
    """Grid too large for the requested sampler, or too coarse for the requested cutoff."""


class ParameterError(GMCError, ValueError):
    """Physical parameter outside its admissible range."""


class PreconditionError(GMCError, ValueError):
    """Operation called on inputs that violate its precondition."""


class ConfigError(GMCError):
    """Experiment configuration failed validation."""

    def __init__(self, message: str, key_path: str = ""):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path
