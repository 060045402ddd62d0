"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`StochCtlError`, so callers can catch the whole family at once.
Degenerate but well-defined outcomes (0/0 ratios and the like) are not
errors; they are reported through a ``degenerate`` flag on the result.
"""


class StochCtlError(Exception):
    """Base class for all package errors."""


class ConfigurationError(StochCtlError, ValueError):
    """Invalid grid, parameter or configuration value."""


class ShapeError(StochCtlError, ValueError):
    """Arrays or grids that do not fit together."""


class DomainError(StochCtlError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class DivergenceError(StochCtlError, ArithmeticError):
    """A simulated state became non-finite.

    Parameters
    ----------
    step : int
        Index of the first grid step that produced a non-finite value.
    """

    def __init__(self, message, step):
        super().__init__(f"{message} (step {step})")
        self.step = step


class NotControllableError(StochCtlError):
    """The Gramian is singular or the rank condition fails."""


class ReductionError(StochCtlError):
    """The reduction to the triple (A1, A2, B1) needs rank D = n."""


class ResourceGuardError(StochCtlError):
    """An enumeration or allocation would exceed its declared guard."""


class BasisDegeneracyError(StochCtlError):
    """Regression design matrix too ill-conditioned; lower the degree."""


class AccuracyError(StochCtlError):
    """Quadrature or iteration did not reach the requested accuracy."""


class RestrictionError(StochCtlError):
    """Input falls outside a documented restriction of the method."""


class PreconditionError(StochCtlError):
    """A stated precondition of the operation does not hold."""


class InfeasibleError(StochCtlError):
    """The requested control problem has no solution on this window."""


class UnsupportedSetError(StochCtlError):
    """Time set that is not a finite union of nondegenerate intervals."""


class UniqueContinuationAlarm(StochCtlError):
    """Zero observation with a nonzero state where that cannot happen."""
