"""Exception types raised across the package."""


class I2cError(Exception):
    """Base class for all solver and model errors."""


class SingularCovariance(I2cError):
    """A covariance that must be positive definite could not be factorized."""


class NonFiniteState(I2cError):
    """A simulated state contained NaN or Inf.

    ``partial`` carries whatever trajectory was produced before the failure.
    """

    def __init__(self, message, t=None, partial=None):
        super().__init__(message)
        self.t = t
        self.partial = partial


class NonFinitePropagation(I2cError):
    """A sigma point or sample mapped to a non-finite value."""


class UnsupportedDegree(I2cError):
    """Requested quadrature degree or point budget is out of range."""


class DegenerateCost(I2cError):
    """Expected cost underflowed, so the temperature update is undefined."""


class IndefiniteQuu(I2cError):
    """The control block of the state-action value is not positive definite."""


class RiskInfeasible(I2cError):
    """The risk-adjusted value regularizer lost positive definiteness."""


class LineSearchFailed(I2cError):
    """No backtracking step decreased the cost.

    ``result`` holds the best iterate found so far.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class StepFailure(I2cError):
    """Wraps an error raised while processing timestep ``t`` of a pass."""

    def __init__(self, t, cause):
        super().__init__(f"t={t}: {cause}")
        self.t = t
        self.cause = cause
