"""Exception types raised across the package.

The CLI maps these onto exit codes: :class:`DomainError` -> 2,
:class:`NumericalError` and its subclasses -> 3.
"""


class ChshError(Exception):
    """Base class for all package errors."""


class DomainError(ChshError, ValueError):
    """An argument lies outside the domain of the operation."""


class NumericalError(ChshError, ArithmeticError):
    """A numerically degenerate or singular evaluation."""


class SingularityError(NumericalError):
    """A Q-function denominator is not strictly positive."""

    def __init__(self, j: int, theta: float, g: float, denominator: float):
        self.j = j
        self.theta = theta
        self.g = g
        self.denominator = denominator
        super().__init__(
            f"Q_{j} denominator {denominator:.3e} <= 0 at theta={theta:.6g} rad, G={g:.6g}"
        )


class DegeneracyError(NumericalError):
    """A ratio has a vanishing denominator (e.g. no coincidences)."""


class NoViolationError(NumericalError):
    """The figure of merit never exceeds zero on the searched range."""


class StateError(ChshError):
    """A covariance matrix fails symmetry or physicality checks."""


class RegimeError(ChshError):
    """Count data falls outside the low-power regime an estimator assumes."""
