"""Exception types raised across the package."""


class CeplError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(CeplError, ValueError):
    """An argument lies outside the domain of the map or operation."""


class ConfigError(CeplError, ValueError):
    """A configuration violates one of its invariants."""


class DegenerateDerivative(CeplError):
    pass


class NoSignChange(CeplError):
    pass


class NotMisiurewicz(CeplError):
    pass


class AtCritical(CeplError):
    pass


class MonotonicityViolation(CeplError):
    pass


class RootTooWide(CeplError):
    pass


class EmptyPartition(CeplError):
    pass


class SuspectedPeriodicity(CeplError):
    pass


class NonDecayingCorrelations(CeplError):
    pass


class DegenerateVariance(CeplError):
    pass


class InsufficientSpread(CeplError):
    pass


class EmptyCell(CeplError):
    pass


class TruncationDominates(CeplError):
    pass


class GateViolated(CeplError):
    pass


class MissingStage(CeplError):
    pass


class StageFailure(CeplError):
    """A pipeline stage failed; wraps the underlying error with stage context."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
