from __future__ import annotations

from typing import Callable

import numpy as np


def finite_diff_grad(fn: Callable[[np.ndarray], float], params, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    theta = np.array(params, dtype=np.float64).ravel()
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + step
        hi = float(fn(theta.copy()))
        theta[i] = orig - step
        lo = float(fn(theta.copy()))
        theta[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(a, b, floor: float = 1e-7) -> np.ndarray:
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
