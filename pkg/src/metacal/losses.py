"""Training losses and evaluation metrics.

``regression_loss``, ``calibration_loss`` and ``total_loss`` accept arrays or
tape tensors and reduce over the last axis, so a stack of episodes yields one
loss per episode.  The metrics (``ece``, ``evaluate_task``) are plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibration import DEFAULT, CdfModel, Variant, adapt, adapt_batched, calibrate_batched, invert_cdf
from .data import TaskDataset
from .model import SharedParams
from .numerics import special
from .numerics import tape as nx
from .numerics.special import DomainError

ECE_LEVELS = np.arange(1, 10) / 10.0


def regression_loss(predictions, targets):
    """Mean squared error over the last axis."""
    n = nx.value_of(predictions).shape[-1] if nx.value_of(predictions).ndim else 0
    if n == 0:
        raise DomainError("regression loss needs at least one prediction")
    if np.shape(nx.value_of(targets))[-1:] != (n,):
        raise DomainError("predictions and targets differ in length")
    r = predictions - targets
    return nx.mean(r * r, axis=-1)


def calibration_loss(cdf_values):
    """``mean_n |p_(n) - n/N|`` with ``p_(n)`` the sorted CDF values.

    The sort permutation comes from the forward values and is held fixed on
    the tape, which gives a subgradient at ties.
    """
    v = nx.value_of(cdf_values)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise DomainError("calibration loss needs at least one value")
    if np.any((v < 0) | (v > 1)) or not np.all(np.isfinite(v)):
        raise DomainError("CDF values must lie in [0, 1]")
    n = v.shape[-1]
    order = np.argsort(v, axis=-1, kind="stable")
    ranked = nx.take_along_axis(cdf_values, order, axis=-1)
    grid = np.arange(1, n + 1) / n
    return nx.mean(nx.absolute(ranked - grid), axis=-1)


def total_loss(reg, cal, lam: float):
    """``lam * reg + (1 - lam) * cal``."""
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"lambda must lie in [0, 1], got {lam}")
    return lam * reg + (1.0 - lam) * cal


def episode_losses(w, xs, ys, xq, yq, lam: float, variant: Variant = DEFAULT):
    """Total loss for each episode in a batch; returns (B,) values or a tensor."""
    f, v, means = adapt_batched(w, xs, ys, xq, variant)
    reg = regression_loss(f, yq)
    if lam == 1.0:
        return reg
    hu = special.gaussian_cdf(yq, f, v)
    h = calibrate_batched(w, hu, means, variant)
    return total_loss(reg, calibration_loss(h), lam)


# metrics

def coverage(cdf: CdfModel, targets, levels=ECE_LEVELS) -> np.ndarray:
    """Fraction of targets at or below the ``p``-quantile, per level."""
    y = np.asarray(targets, dtype=np.float64)
    q = invert_cdf(cdf, np.asarray(levels, dtype=np.float64))
    return np.mean(y[None, :] <= q, axis=1)


def ece(cdf: CdfModel, query) -> float:
    """Expected calibration error over the levels 0.1, ..., 0.9.

    ``query`` is the task's query set (or just its targets) aligned with the
    points ``cdf`` is bound to.
    """
    y = query.targets if isinstance(query, TaskDataset) else np.asarray(query, dtype=np.float64)
    if y.size == 0:
        raise DomainError("ece needs a non-empty query set")
    return float(np.mean(np.abs(ECE_LEVELS - coverage(cdf, y))))


def total_error(mse: float, ece_value: float) -> float:
    return (mse + ece_value) / 2.0


def evaluate_task(params: SharedParams, support: TaskDataset, query: TaskDataset,
                  variant: Variant = DEFAULT) -> tuple[float, float]:
    """MSE of the posterior means and ECE of the calibrated CDF on ``query``."""
    task = adapt(params, support, query.features, variant)
    mse = float(regression_loss(task.mean, query.targets))
    return mse, ece(task.cdf, query)


@dataclass(frozen=True)
class EvalReport:
    """Averages over evaluated episodes plus the per-task breakdown.

    ``per_task`` rows are ``(task_id, mse, ece)``, each averaged over that
    task's episodes.  Standard errors are taken across all episodes.
    """

    mse: float
    ece: float
    te: float
    mse_se: float = 0.0
    ece_se: float = 0.0
    te_se: float = 0.0
    per_task: list = field(default_factory=list)

    @classmethod
    def from_episodes(cls, records: list[tuple[str, float, float]]) -> "EvalReport":
        if not records:
            raise ValueError("no episodes to report")
        mse = np.array([r[1] for r in records])
        ec = np.array([r[2] for r in records])
        te = (mse + ec) / 2.0

        def se(a):
            return float(a.std(ddof=1) / np.sqrt(a.size)) if a.size > 1 else 0.0

        per_task = []
        for tid in dict.fromkeys(r[0] for r in records):
            rows = [r for r in records if r[0] == tid]
            per_task.append((tid, float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows]))))
        m, e = float(mse.mean()), float(ec.mean())
        return cls(m, e, total_error(m, e), se(mse), se(ec), se(te), per_task)
