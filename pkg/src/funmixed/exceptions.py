"""Exception hierarchy used throughout the package."""


class FunMixedError(Exception):
    """Base class for all package errors."""


class GridError(FunMixedError, ValueError):
    """Invalid design time grid (too short, not strictly increasing)."""


class IncidenceError(FunMixedError, ValueError):
    """An observation time does not match any design point."""


class InestimableEffectError(FunMixedError):
    """A fixed effect cannot be estimated because one factor level is absent.

    Attributes
    ----------
    factor : str
        ``"gender"`` or ``"age"``.
    """

    def __init__(self, factor, message=None):
        self.factor = factor
        super().__init__(message or f"effect inestimable: all individuals share one {factor} level")


class SingularSystemError(FunMixedError, ArithmeticError):
    """A penalized normal-equation system or covariance is numerically singular."""


class SelectionError(FunMixedError):
    """Every smoothing-parameter evaluation failed."""

    def __init__(self, message, first_failure=None):
        self.first_failure = first_failure
        super().__init__(message)


class ResamplingError(FunMixedError):
    """Too many refits failed during bootstrap or permutation resampling."""

    def __init__(self, message, n_failed=0, n_total=0):
        self.n_failed = n_failed
        self.n_total = n_total
        super().__init__(message)


class SchemaError(FunMixedError, ValueError):
    """Input table does not match the expected schema."""
