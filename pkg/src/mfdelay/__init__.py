"""Controlled mean-field delay SDEs, mean-field anticipated BSDEs and the
stochastic maximum principle, simulated with interacting particles."""

__version__ = "0.1.0"

from .core import BoundaryData, DelaySpec, ParticleEnsemble, RandomSource, TimeGrid, build_grid, sample_brownian
from .errors import (CapacityError, ConfigurationError, DispatchError, DivergenceError, DomainError,
                     MFDelayError, NonConvergenceError, PreconditionError, StepSizeError)
from .measure import EmpiricalLaw, prime_expectation, w2_distance, w2_distance_1d, w2_distance_sliced
from .coefficients import CoefficientSet, Theta

__all__ = [
    "BoundaryData", "CapacityError", "CoefficientSet", "ConfigurationError", "DelaySpec",
    "DispatchError", "DivergenceError", "DomainError", "EmpiricalLaw", "MFDelayError",
    "NonConvergenceError", "ParticleEnsemble", "PreconditionError", "RandomSource",
    "StepSizeError", "Theta", "TimeGrid", "build_grid", "prime_expectation", "sample_brownian",
    "w2_distance", "w2_distance_1d", "w2_distance_sliced", "__version__",
]
