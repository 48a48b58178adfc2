"""Learning stabilizable control-affine dynamics with contraction-metric certificates."""

from .errors import InfeasibleError, NumericError, ParameterError

__version__ = "0.1.0"

__all__ = ["InfeasibleError", "NumericError", "ParameterError", "__version__"]
