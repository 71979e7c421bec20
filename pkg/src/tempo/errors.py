"""Exception hierarchy shared by all tempo modules."""

from __future__ import annotations


class TempoError(Exception):
    """Base class for library errors."""


class DimensionError(TempoError, ValueError):
    def __init__(self, message: str, stage: int | None = None):
        super().__init__(message if stage is None else f"stage {stage}: {message}")
        self.stage = stage


class ValidationError(TempoError, ValueError):
    pass


class UnsupportedError(TempoError):
    pass


class EvaluationError(TempoError):
    """An evaluator returned non-finite output or failed internally."""

    def __init__(self, message: str, stage: int | None = None):
        super().__init__(message if stage is None else f"stage {stage}: {message}")
        self.stage = stage


class NewtonError(EvaluationError):
    """Implicit integration step did not converge."""

    def __init__(self, iterate, residual: float, stage: int | None = None):
        super().__init__(f"implicit Euler Newton failed, residual {residual:.3e}", stage)
        self.iterate = iterate
        self.residual = residual


class FactorizationError(TempoError):
    """Stage-wise KKT factorization broke down (reduced Hessian not positive definite)."""

    def __init__(self, stage: int):
        super().__init__(f"KKT factorization breakdown at stage {stage}")
        self.stage = stage


class SubproblemError(TempoError):
    """A Schwarz subdomain solve failed; carries the partial iteration log."""

    def __init__(self, subdomain: int, report, log):
        super().__init__(f"subproblem {subdomain} failed: {report.status}")
        self.subdomain = subdomain
        self.report = report
        self.log = log
