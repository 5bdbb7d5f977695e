"""Error function and Gaussian CDF, usable on arrays or tape tensors."""

from __future__ import annotations

import numpy as np

from . import tape as nx

SQRT2 = np.sqrt(2.0)


class DomainError(ValueError):
    """An argument lies outside the domain of the function."""


def erf(x):
    """Error function; on a tape its derivative is (2/sqrt(pi)) exp(-x^2)."""
    return nx.erf(x)


def gaussian_cdf(y, mean, variance):
    """P(Y <= y) for Y ~ N(mean, variance), via ``0.5 * (1 + erf(z / sqrt 2))``.

    All arguments broadcast.  Raises :class:`DomainError` if any variance is
    not strictly positive.
    """
    var = nx.value_of(variance)
    if np.any(~(var > 0)):
        raise DomainError(f"variance must be positive, got min {np.min(var)!r}")
    z = (y - mean) / nx.sqrt(2.0 * variance)
    return 0.5 * (1.0 + nx.erf(z))
