"""Deep-kernel Gaussian process with a neural mean function.

The kernel is ``exp(-||g(x) - g(x')||^2 / 2) + beta * [x is x']`` where ``g`` is
an MLP encoder; the noise term only appears on the diagonal of the support Gram
matrix.  Adapting to a support set is the closed-form GP posterior, so the
whole pipeline is differentiable with respect to the shared parameters.

Functions named ``*_batched`` operate on stacks of episodes (leading batch
axis) and accept either numpy arrays or tape tensors for the weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import TaskDataset
from .numerics import special
from .numerics import tape as nx
from .numerics.linalg import cholesky_with_jitter, solve_spd

CHECKPOINT_FORMAT = "metacal-checkpoint"
CHECKPOINT_VERSION = 1

HIDDEN = 32
ENCODER_LAYERS = 3
MEAN_LAYERS = 4


def _softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


@dataclass(frozen=True, eq=False)
class SharedParams:
    """All task-shared trainables, stored unconstrained.

    ``arrays`` is an ordered mapping of names to float64 arrays:
    ``encoder.{i}.weight``/``encoder.{i}.bias``, ``mean.{i}.weight``/
    ``mean.{i}.bias``, and scalars ``raw_beta``, ``raw_sigma``, ``raw_alpha``.
    """

    feature_dim: int
    arrays: dict

    @property
    def names(self) -> list[str]:
        return list(self.arrays)

    @property
    def beta(self) -> float:
        return float(nx.softplus(self.arrays["raw_beta"]))

    @property
    def sigma(self) -> float:
        return float(nx.softplus(self.arrays["raw_sigma"]))

    @property
    def alpha(self) -> float:
        return float(nx.logistic(self.arrays["raw_alpha"]))

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def unflatten(self, theta: np.ndarray) -> "SharedParams":
        theta = np.asarray(theta, dtype=np.float64)
        out, i = {}, 0
        for name, a in self.arrays.items():
            out[name] = theta[i:i + a.size].reshape(a.shape).copy()
            i += a.size
        if i != theta.size:
            raise ValueError(f"expected {i} values, got {theta.size}")
        return SharedParams(self.feature_dim, out)

    def replace(self, **arrays) -> "SharedParams":
        out = {k: v.copy() for k, v in self.arrays.items()}
        for k, v in arrays.items():
            if k not in out:
                raise KeyError(k)
            out[k] = np.array(v, dtype=np.float64).reshape(out[k].shape)
        return SharedParams(self.feature_dim, out)

    def on_tape(self, tape: nx.Tape) -> dict:
        return {k: tape.variable(v) for k, v in self.arrays.items()}


def init_params(feature_dim: int, rng: np.random.Generator | int = 0, hidden: int = HIDDEN) -> SharedParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, beta = sigma = 0.1, alpha = 0.5."""
    rng = np.random.default_rng(rng)
    arrays: dict = {}

    def layers(prefix, sizes):
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(a)
            arrays[f"{prefix}.{i}.weight"] = rng.uniform(-bound, bound, size=(a, b))
            arrays[f"{prefix}.{i}.bias"] = np.zeros(b)

    layers("encoder", [feature_dim] + [hidden] * ENCODER_LAYERS)
    layers("mean", [feature_dim] + [hidden] * (MEAN_LAYERS - 1) + [1])
    arrays["raw_beta"] = np.array(_softplus_inverse(0.1))
    arrays["raw_sigma"] = np.array(_softplus_inverse(0.1))
    arrays["raw_alpha"] = np.array(0.0)
    return SharedParams(feature_dim, arrays)


def _mlp(w: Mapping, prefix: str, x):
    n = sum(1 for k in w if k.startswith(prefix + ".") and k.endswith(".weight"))
    h = x
    for i in range(n):
        h = nx.matmul(h, w[f"{prefix}.{i}.weight"]) + w[f"{prefix}.{i}.bias"]
        if i < n - 1:
            h = nx.tanh(h)
    return h


def _check_dim(x, feature_dim: int):
    d = nx.value_of(x).shape[-1]
    if d != feature_dim:
        raise ValueError(f"feature dimension mismatch: expected {feature_dim}, got {d}")


def encode_batched(w: Mapping, x, identity: bool = False):
    """Encoder ``g``: (..., D) -> (..., 32), or the identity for the no-network ablation."""
    if identity:
        return x
    return _mlp(w, "encoder", x)


def mean_batched(w: Mapping, x):
    """Mean network ``mu`` on raw features: (..., D) -> (...)."""
    out = _mlp(w, "mean", x)
    return nx.reshape(out, nx.value_of(out).shape[:-1])


def rbf_cross(za, zb):
    """``exp(-||a - b||^2 / 2)`` for all pairs: (..., A, L) x (..., B, L) -> (..., A, B)."""
    diff = nx.expand_dims(za, -2) - nx.expand_dims(zb, -3)
    return nx.exp(-0.5 * nx.sum(diff * diff, axis=-1))


def posterior_batched(w: Mapping, xs, ys, xq, identity_encoder: bool = False):
    """GP posterior mean and variance at ``xq`` given supports ``(xs, ys)``.

    Shapes: ``xs`` (B, S, D), ``ys`` (B, S), ``xq`` (B, Q, D); returns two
    (B, Q) arrays or tensors.
    """
    beta = nx.softplus(w["raw_beta"])
    zs = encode_batched(w, xs, identity_encoder)
    zq = encode_batched(w, xq, identity_encoder)
    n = nx.value_of(xs).shape[-2]
    gram, _ = cholesky_with_jitter(rbf_cross(zs, zs) + beta * np.eye(n))
    cross = rbf_cross(zq, zs)
    weights = solve_spd(gram, ys - mean_batched(w, xs))
    f = mean_batched(w, xq) + nx.sum(cross * nx.expand_dims(weights, -2), axis=-1)
    cross_t = nx.swap_last(cross)
    v = 1.0 + beta - nx.sum(cross_t * solve_spd(gram, cross_t), axis=-2)
    return f, v


@dataclass(frozen=True)
class PosteriorPrediction:
    mean: np.ndarray | float
    variance: np.ndarray | float


def _as_points(x, feature_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    _check_dim(pts, feature_dim)
    return pts, single


def encode(params: SharedParams, x) -> np.ndarray:
    pts, single = _as_points(x, params.feature_dim)
    z = encode_batched(params.arrays, pts)
    return z[0] if single else z


def kernel(params: SharedParams, x, x2, identical: bool = False) -> float:
    """Deep kernel value; ``identical`` adds the noise term ``beta``."""
    a, _ = _as_points(x, params.feature_dim)
    b, _ = _as_points(x2, params.feature_dim)
    za, zb = encode_batched(params.arrays, a), encode_batched(params.arrays, b)
    k = float(np.exp(-0.5 * np.sum((za[0] - zb[0]) ** 2)))
    return k + params.beta if identical else k


def gp_posterior(params: SharedParams, support: TaskDataset, x, identity_encoder: bool = False) -> PosteriorPrediction:
    """Posterior mean/variance at one point (``x`` of shape (D,)) or many ((M, D))."""
    if len(support) == 0:
        raise ValueError("support set is empty")
    pts, single = _as_points(x, params.feature_dim)
    _check_dim(support.features, params.feature_dim)
    f, v = posterior_batched(params.arrays, support.features[None], support.targets[None], pts[None],
                             identity_encoder)
    f, v = f[0], v[0]
    if single:
        return PosteriorPrediction(float(f[0]), float(v[0]))
    return PosteriorPrediction(f, v)


def uncalibrated_cdf(params: SharedParams, support: TaskDataset, x, y, identity_encoder: bool = False):
    """Gaussian predictive CDF of the adapted GP at ``(x, y)``."""
    post = gp_posterior(params, support, x, identity_encoder)
    return special.gaussian_cdf(np.asarray(y, dtype=np.float64), post.mean, post.variance)


# checkpoints

def save_checkpoint(path, params: SharedParams, extra: dict | None = None) -> None:
    """Write parameters as JSON; floats use ``repr`` so they round-trip bitwise."""
    record = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "feature_dim": params.feature_dim,
        "params": {
            name: {"shape": list(a.shape), "values": [float(v) for v in a.ravel()]}
            for name, a in params.arrays.items()
        },
    }
    if extra:
        record["extra"] = extra
    Path(path).write_text(json.dumps(record, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[SharedParams, dict]:
    record = json.loads(Path(path).read_text(encoding="utf-8"))
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a metacal checkpoint")
    if record.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {record.get('format_version')}")
    arrays = {
        name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in record["params"].items()
    }
    return SharedParams(int(record["feature_dim"]), arrays), record.get("extra", {})
