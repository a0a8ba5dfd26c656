"""Exception and warning types shared across the package."""

from __future__ import annotations


class SynthError(Exception):
    """Base class for all package errors."""


class ConfigError(SynthError, ValueError):
    pass


class IngestError(SynthError, ValueError):
    """Raised when a panel file fails validation.

    ``unit`` and ``time`` name the offending cell when one can be identified.
    """

    def __init__(self, message: str, unit: str | None = None, time: str | None = None):
        super().__init__(message)
        self.unit = unit
        self.time = time


class EstimationError(SynthError):
    """Base class for failures raised while fitting a model."""


class SolverError(EstimationError):
    """The simplex solver did not reach its stopping rule.

    Carries the best iterate found and the gradient norm at that point so the
    caller can decide whether it is usable anyway.
    """

    def __init__(self, message: str, best_iterate=None, grad_norm: float = float("nan")):
        super().__init__(message)
        self.best_iterate = best_iterate
        self.grad_norm = grad_norm


class RankError(EstimationError):
    pass


class InsufficientDataError(EstimationError):
    pass


class NumericalError(EstimationError, FloatingPointError):
    pass


class DegenerateError(SynthError, ValueError):
    pass


class ExperimentError(SynthError):
    """Too many replications of an experiment failed."""


class SamplerWarning(UserWarning):
    pass


class ConvergenceWarning(UserWarning):
    pass
