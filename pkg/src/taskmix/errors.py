"""Exception types shared across the package.

Contract violations raise rather than degrade: a ShapeError names both
offending shapes, a ConfigError points at the bad field, and ContractError
covers every other broken precondition. The CLI maps all of these to a
machine-readable JSON record on stderr and a nonzero exit code.
"""


class TaskmixError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(TaskmixError, ValueError):
    """A documented precondition or invariant was violated."""


class ShapeError(ContractError):
    """Dimension mismatch between operands."""

    @classmethod
    def mismatch(cls, op: str, a, b) -> "ShapeError":
        return cls(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class ConfigError(TaskmixError, ValueError):
    """Invalid configuration value."""


class FitError(TaskmixError, RuntimeError):
    """Curve fitting failed to converge; carries the best residual seen."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class TrainingAborted(TaskmixError, RuntimeError):
    """Training hit a non-finite loss; carries the episode provenance."""

    def __init__(self, message: str, step: int, provenance: dict):
        super().__init__(message)
        self.step = step
        self.provenance = provenance
