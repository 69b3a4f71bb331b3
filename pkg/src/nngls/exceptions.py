"""Exception types raised across the package."""


class DegenerateDesignError(ValueError):
    """Two or more locations share the same coordinates."""


class NumericalError(RuntimeError):
    """A covariance block was not numerically positive definite, or a loss went non-finite."""


class InsufficientDataError(ValueError):
    """Not enough observations for the requested estimate."""
