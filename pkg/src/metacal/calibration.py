"""Per-task calibration of the GP predictive CDF.

The calibrator is the CDF of an equal-weight Gaussian mixture placed on the
uncalibrated CDF values of the support instances; the calibrated CDF mixes it
with the uncalibrated one, ``h = alpha * hU + (1 - alpha) * r(hU)``.  The
step-function empirical calibrator is provided as the classical baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import TaskDataset
from .model import SharedParams, posterior_batched
from .numerics import special
from .numerics import tape as nx
from .numerics.special import SQRT2, DomainError


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Variant:
    """Model switches used for the ablations.

    identity_encoder: ``g(x) = x`` (no encoder network).
    use_calibrator: ``False`` drops the mixture calibrator (``h = hU``).
    fix_alpha: hold the mixing weight at this value instead of learning it.
    split_support: fit the GP on the first half of the support and the
        calibrator on the second half.
    empirical_calibrator: at inference, swap the mixture calibrator for the
        empirical step function.
    """

    identity_encoder: bool = False
    use_calibrator: bool = True
    fix_alpha: float | None = None
    split_support: bool = False
    empirical_calibrator: bool = False

    def __post_init__(self):
        if self.fix_alpha is not None and not 0.0 <= self.fix_alpha <= 1.0:
            raise ValueError(f"fix_alpha must lie in [0, 1], got {self.fix_alpha}")


DEFAULT = Variant()


# batched building blocks (arrays or tape tensors)

def gmm_cdf(p, means, sigma):
    """Mixture CDF ``mean_i Phi((p - m_i) / sigma)``; p (..., Q), means (..., S)."""
    z = (nx.expand_dims(p, -1) - nx.expand_dims(means, -2)) / (SQRT2 * sigma)
    return nx.mean(0.5 * (1.0 + nx.erf(z)), axis=-1)


def mixing_weight(w, variant: Variant = DEFAULT):
    if variant.fix_alpha is not None:
        return variant.fix_alpha
    return nx.logistic(w["raw_alpha"])


def adapt_batched(w, xs, ys, xq, variant: Variant = DEFAULT):
    """Adapt to supports and return ``(f_q, v_q, component_means)``.

    ``component_means`` (the uncalibrated CDF at the calibration instances) is
    ``None`` when the variant has no calibrator.
    """
    n = nx.value_of(xs).shape[-2]
    if variant.split_support:
        if n < 2:
            raise ValueError("support splitting needs at least two support instances")
        m = n // 2
        fit_x, fit_y, cal_x, cal_y = xs[..., :m, :], ys[..., :m], xs[..., m:, :], ys[..., m:]
    else:
        fit_x, fit_y, cal_x, cal_y = xs, ys, xs, ys
    if not variant.use_calibrator:
        f, v = posterior_batched(w, fit_x, fit_y, xq, variant.identity_encoder)
        return f, v, None
    n_cal = cal_x.shape[-2]
    xall = np.concatenate([np.asarray(cal_x), np.asarray(xq)], axis=-2)
    f, v = posterior_batched(w, fit_x, fit_y, xall, variant.identity_encoder)
    means = special.gaussian_cdf(cal_y, f[..., :n_cal], v[..., :n_cal])
    return f[..., n_cal:], v[..., n_cal:], means


def calibrate_batched(w, hu, means, variant: Variant = DEFAULT):
    """Mixed calibrated CDF from uncalibrated values ``hu`` (..., Q)."""
    if not variant.use_calibrator:
        return hu
    alpha = mixing_weight(w, variant)
    r = gmm_cdf(hu, means, nx.softplus(w["raw_sigma"]))
    return alpha * hu + (1.0 - alpha) * r


# calibrator objects

@dataclass(frozen=True)
class GmmCalibrator:
    component_means: np.ndarray
    sigma: float

    def __call__(self, p):
        return apply_r(self, p)

    @property
    def n_components(self) -> int:
        return self.component_means.shape[0]


@dataclass(frozen=True)
class EmpiricalCalibrator:
    sorted_levels: np.ndarray

    def __call__(self, p):
        return apply_r_emp(self, p)


def fit_gmm_calibrator(params: SharedParams, support: TaskDataset, variant: Variant = DEFAULT) -> GmmCalibrator:
    """Component means are the uncalibrated CDF values at the support instances
    (the same support also adapts the GP, unless the variant splits it)."""
    if len(support) == 0:
        raise ValueError("support set is empty")
    v = Variant(variant.identity_encoder, True, variant.fix_alpha, variant.split_support)
    xs, ys = support.features[None], support.targets[None]
    _, _, means = adapt_batched(params.arrays, xs, ys, xs[:, :0], v)
    return GmmCalibrator(np.asarray(means[0]), params.sigma)


def apply_r(cal: GmmCalibrator, p):
    """``(1 / 2N) sum_i (1 + erf((p - m_i) / (sqrt 2 sigma)))``, vectorised over ``p``."""
    p = np.asarray(p, dtype=np.float64)
    out = gmm_cdf(p.reshape(-1), cal.component_means, cal.sigma)
    return out.reshape(p.shape) if p.ndim else float(out[0])


def fit_empirical_calibrator(levels) -> EmpiricalCalibrator:
    levels = np.sort(np.asarray(levels, dtype=np.float64).ravel())
    if levels.size == 0:
        raise ValueError("need at least one level")
    return EmpiricalCalibrator(levels)


def apply_r_emp(cal: EmpiricalCalibrator, p):
    """``n / N`` on ``[p_(n), p_(n+1))``, 0 below ``p_(1)``, 1 from ``p_(N)`` on."""
    p = np.asarray(p, dtype=np.float64)
    out = np.searchsorted(cal.sorted_levels, p, side="right") / cal.sorted_levels.size
    return out if p.ndim else float(out)


# conditional CDF models bound to a set of query points

class CdfModel:
    """A non-decreasing conditional CDF evaluated at ``n`` fixed inputs.

    ``center`` and ``scale`` (shape (n,)) seed the quantile bracket.  Calling
    the model with ``y`` of shape (..., n) returns CDF values of the same shape.
    """

    center: np.ndarray
    scale: np.ndarray

    def __call__(self, y) -> np.ndarray:
        raise NotImplementedError

    def limits(self) -> tuple[np.ndarray, np.ndarray]:
        """CDF values as ``y -> -inf`` and ``y -> +inf``."""
        n = self.center.shape[0]
        return np.zeros(n), np.ones(n)

    def __len__(self) -> int:
        return self.center.shape[0]


class GaussianCdf(CdfModel):
    def __init__(self, mean, variance):
        self.center = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.variance = np.atleast_1d(np.asarray(variance, dtype=np.float64))
        self.scale = np.sqrt(self.variance)

    def __call__(self, y):
        return special.gaussian_cdf(np.asarray(y, dtype=np.float64), self.center, self.variance)


class CalibratedCdf(CdfModel):
    """``alpha * hU + (1 - alpha) * r(hU)`` for a Gaussian ``hU`` and any calibrator ``r``."""

    def __init__(self, mean, variance, calibrator: Callable | None, alpha: float):
        self.base = GaussianCdf(mean, variance)
        self.center, self.scale = self.base.center, self.base.scale
        self.calibrator = calibrator
        self.alpha = float(alpha)

    def _mix(self, hu):
        if self.calibrator is None:
            return hu
        return self.alpha * hu + (1.0 - self.alpha) * np.asarray(self.calibrator(hu))

    def __call__(self, y):
        return self._mix(self.base(y))

    def limits(self):
        n = self.center.shape[0]
        return self._mix(np.zeros(n)), self._mix(np.ones(n))


class FunctionCdf(CdfModel):
    """Wrap ``fn(y) -> cdf`` (vectorised, aligned with the points) as a model."""

    def __init__(self, fn: Callable, center, scale):
        self.fn = fn
        self.center = np.atleast_1d(np.asarray(center, dtype=np.float64))
        self.scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), self.center.shape).copy()

    def __call__(self, y):
        return np.asarray(self.fn(np.asarray(y, dtype=np.float64)))

    def limits(self):
        n = self.center.shape[0]
        with np.errstate(all="ignore"):
            lo = np.broadcast_to(self(np.full(n, -np.inf)), (n,)).astype(np.float64)
            hi = np.broadcast_to(self(np.full(n, np.inf)), (n,)).astype(np.float64)
        return np.where(np.isfinite(lo), lo, 0.0), np.where(np.isfinite(hi), hi, 1.0)


def invert_cdf(cdf: CdfModel, p, max_doublings: int = 60, max_iter: int = 200) -> np.ndarray:
    """Quantiles ``inf{y : h(y) >= p}`` at every point of ``cdf``.

    ``p`` may be a scalar (result shape (n,)) or an array of levels of shape
    (k,) (result (k, n)).  The bracket starts at ``center -+ scale`` and
    doubles outward; bisection then runs to floating-point resolution.  Levels
    outside the range the CDF actually attains give ``-inf`` / ``+inf``.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0) | (p >= 1)) or np.any(~np.isfinite(p)):
        raise DomainError("quantile levels must lie strictly inside (0, 1)")
    scalar = p.ndim == 0
    levels = np.atleast_1d(p)[:, None]
    n = len(cdf)
    shape = (levels.shape[0], n)
    center = np.broadcast_to(cdf.center, shape)
    width = np.broadcast_to(np.maximum(cdf.scale, 1e-12), shape)
    lo_lim, hi_lim = cdf.limits()
    below = levels <= lo_lim[None, :]
    above = levels > hi_lim[None, :]
    active = ~(below | above)

    lo = center - width
    hi = center + width
    step = width.copy()
    for _ in range(max_doublings):
        need_lo = active & (cdf(lo) >= levels)
        need_hi = active & (cdf(hi) < levels)
        if not (need_lo.any() or need_hi.any()):
            break
        step = step * 2.0
        lo = np.where(need_lo, center - step, lo)
        hi = np.where(need_hi, center + step, hi)
    else:
        if (active & ((cdf(lo) >= levels) | (cdf(hi) < levels))).any():
            raise ConvergenceError(f"no bracket found within {max_doublings} doublings")

    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        done = (mid <= lo) | (mid >= hi)
        if done.all():
            break
        go_up = cdf(mid) < levels
        lo = np.where(go_up & ~done, mid, lo)
        hi = np.where(~go_up & ~done, mid, hi)

    out = np.where(below, -np.inf, np.where(above, np.inf, hi))
    return out[0] if scalar else out


# single-task convenience

@dataclass(frozen=True)
class AdaptedTask:
    """A model adapted (and calibrated) to one support set, bound to query inputs."""

    mean: np.ndarray
    variance: np.ndarray
    cdf: CdfModel
    uncalibrated: GaussianCdf
    calibrator: Callable | None


def adapt(params: SharedParams, support: TaskDataset, query_x, variant: Variant = DEFAULT) -> AdaptedTask:
    if len(support) == 0:
        raise ValueError("support set is empty")
    xq = np.asarray(query_x, dtype=np.float64)
    if xq.ndim == 1:
        xq = xq[None, :]
    w = params.arrays
    f, v, means = adapt_batched(w, support.features[None], support.targets[None], xq[None], variant)
    f, v = np.asarray(f[0]), np.asarray(v[0])
    if means is None:
        calibrator = None
    elif variant.empirical_calibrator:
        calibrator = fit_empirical_calibrator(means[0])
    else:
        calibrator = GmmCalibrator(np.asarray(means[0]), params.sigma)
    alpha = float(mixing_weight(w, variant))
    return AdaptedTask(f, v, CalibratedCdf(f, v, calibrator, alpha), GaussianCdf(f, v), calibrator)


def calibrated_cdf(params: SharedParams, support: TaskDataset, x, y, variant: Variant = DEFAULT):
    """Calibrated CDF value(s) ``h(y | x; S)``; ``x`` is (D,) or (M, D) with ``y`` (M,)."""
    x = np.asarray(x, dtype=np.float64)
    task = adapt(params, support, x, variant)
    if x.ndim == 1:
        out = task.cdf(np.asarray(y, dtype=np.float64)[..., None])[..., 0]
        return float(out) if out.ndim == 0 else out
    return task.cdf(y)
