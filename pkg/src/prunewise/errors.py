"""Exception types shared across the package."""


class PrunewiseError(Exception):
    """Base class for all package errors."""


class InputError(PrunewiseError):
    """Invalid argument or malformed in-memory data."""


class DataFormatError(PrunewiseError):
    """Malformed file content (corpus lines, model binaries, configs)."""


class TrainingDivergence(PrunewiseError):
    """Loss became NaN/Inf during training. Carries the offending step index."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"training loss diverged at step {step}")


class SingularityError(PrunewiseError):
    """Design matrix is rank deficient. Carries the offending column name."""

    def __init__(self, column: str, message: str | None = None):
        self.column = column
        super().__init__(message or f"design matrix is singular at column {column!r}")


class InsufficientDataError(PrunewiseError):
    """Too few rows for the requested fit."""


class PurityError(PrunewiseError):
    """A selection step touched data it must not see (target labels)."""


class PipelineError(PrunewiseError):
    """A pipeline stage failed beyond the per-candidate isolation policy."""
