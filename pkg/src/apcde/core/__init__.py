"""Numeric core: tape-based reverse-mode differentiation and stable kernels."""
from . import tape as ops
from .numerics import finite_diff_gradient, logdet_lu, logsumexp, lu_factor
from .tape import Tape, Var, gradient_of

__all__ = ["ops", "Tape", "Var", "gradient_of", "finite_diff_gradient",
           "logdet_lu", "logsumexp", "lu_factor"]
