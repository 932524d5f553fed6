"""Exception types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration, shapes or hyperparameters."""


class InputError(ValueError):
    """Bad input data (non-finite values, wrong widths, out-of-range labels)."""


class SchemaError(InputError):
    """A CSV file does not satisfy its declared column roles."""

    def __init__(self, message: str, column: str | None = None):
        super().__init__(message)
        self.column = column


class TrainingDivergence(RuntimeError):
    """Loss became non-finite during optimization."""

    def __init__(self, message: str, step: int, stage: str | None = None):
        super().__init__(message)
        self.step = step
        self.stage = stage


class SolverError(RuntimeError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class IntegrityError(RuntimeError):
    """Cross-fitting bookkeeping is inconsistent."""


class DegenerateModelError(RuntimeError):
    """A fitted model is unusable (for example a classifier saturated at a bound)."""
