"""Exception hierarchy shared by every stage of the estimator."""


class FeasemError(Exception):
    """Base class for all package errors."""


class DomainError(FeasemError, ValueError):
    """An input lies outside the domain of a formula (e.g. a nonpositive variance)."""


class PreconditionError(FeasemError, ValueError):
    """An operation was called on inputs that violate its preconditions."""


class NumericError(FeasemError, ArithmeticError):
    """A numerical routine failed (factorization, all optimizer starts, ...)."""


class StageError(FeasemError):
    """Wraps a failure inside the estimation pipeline with the stage that raised it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
