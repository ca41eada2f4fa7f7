"""Exception types shared across the package."""

from __future__ import annotations


class MFDelayError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MFDelayError, ValueError):
    """Inconsistent grid, boundary data, coefficients or experiment config."""


class CapacityError(MFDelayError, OverflowError):
    """A grid or array would exceed the supported index range."""


class DomainError(MFDelayError, ValueError):
    """An operation was applied outside its domain (e.g. an empty law)."""


class DispatchError(MFDelayError, TypeError):
    """No implementation for the requested input kind (e.g. dimension)."""


class PreconditionError(MFDelayError, ValueError):
    """Declared structural assumptions were falsified by a probe."""


class DivergenceError(MFDelayError, ArithmeticError):
    """A simulation produced a non-finite value."""

    def __init__(self, message: str, step: int | None = None, time: float | None = None):
        super().__init__(message)
        self.step = step
        self.time = time


class NonConvergenceError(MFDelayError, RuntimeError):
    """An iteration failed to reach its tolerance; carries the norm history."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = list(history or [])


class StepSizeError(MFDelayError, RuntimeError):
    """Descent kept increasing the objective even after step halving."""
