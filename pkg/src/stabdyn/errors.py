"""Exception types shared across the package."""


class ParameterError(ValueError):
    """Invalid argument: bad dimensions, ranges or configuration values."""


class NumericError(ArithmeticError):
    """A numerical routine failed (non-finite values, singular systems, ...)."""


class InfeasibleError(RuntimeError):
    """A convex sub-problem that must be feasible was reported infeasible."""
