from .gradcheck import finite_diff_grad, relative_error
from .linalg import SingularMatrixError, cholesky_factor, cholesky_with_jitter, solve_spd
from .special import DomainError, erf, gaussian_cdf
from .tape import Tape, Tensor, value_of

__all__ = [
    "DomainError",
    "SingularMatrixError",
    "Tape",
    "Tensor",
    "cholesky_factor",
    "cholesky_with_jitter",
    "erf",
    "finite_diff_grad",
    "gaussian_cdf",
    "relative_error",
    "solve_spd",
    "value_of",
]
