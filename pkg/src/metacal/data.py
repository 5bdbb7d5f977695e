"""Multi-task regression data: containers, synthetic generators, CSV I/O,
standardisation and the meta-train/val/test task split."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPLITS = ("meta-train", "meta-val", "meta-test")


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TaskDataset:
    """Labelled instances of one task: ``features`` is (N, D), ``targets`` (N,)."""

    task_id: str
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.targets, dtype=np.float64).ravel()
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError(f"task {self.task_id}: features {x.shape} do not match targets {y.shape}")
        if y.size == 0:
            raise ValueError(f"task {self.task_id} is empty")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError(f"task {self.task_id} has non-finite entries")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", y)

    def __len__(self) -> int:
        return self.targets.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, index) -> "TaskDataset":
        index = np.asarray(index)
        return TaskDataset(self.task_id, self.features[index], self.targets[index])


@dataclass(frozen=True)
class TaskCollection:
    """Tasks sharing a feature dimension, each optionally tagged with a split."""

    tasks: tuple[TaskDataset, ...]
    assignment: tuple[str | None, ...] = field(default=())

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise ValueError("a collection needs at least one task")
        dims = {t.dim for t in tasks}
        if len(dims) != 1:
            raise ValueError(f"tasks have inconsistent feature dimensions {sorted(dims)}")
        assignment = tuple(self.assignment) or (None,) * len(tasks)
        if len(assignment) != len(tasks):
            raise ValueError("assignment length does not match number of tasks")
        for tag in assignment:
            if tag is not None and tag not in SPLITS:
                raise ValueError(f"unknown split tag {tag!r}")
        object.__setattr__(self, "tasks", tasks)
        object.__setattr__(self, "assignment", assignment)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def dim(self) -> int:
        return self.tasks[0].dim

    def split(self, tag: str) -> list[TaskDataset]:
        return [t for t, a in zip(self.tasks, self.assignment) if a == tag]


# synthetic generators

def _rbf_gram(x: np.ndarray, lengthscale: float) -> np.ndarray:
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    return np.exp(-0.5 * d2 / lengthscale**2)


def _noise(rng, shape_name: str, x: np.ndarray, scale: float, ratio: float) -> np.ndarray:
    n = x.shape[0]
    if shape_name == "gaussian":
        return scale * rng.standard_normal(n)
    if shape_name == "skewed":
        # centred exponential, unit variance before scaling
        return scale * (rng.standard_exponential(n) - 1.0)
    if shape_name == "heteroscedastic":
        # noise std grows from scale to ratio * scale along the first feature
        w = 1.0 / (1.0 + np.exp(-4.0 * x[:, 0]))
        return scale * (1.0 + (ratio - 1.0) * w) * rng.standard_normal(n)
    if shape_name == "skewed-heteroscedastic":
        w = 1.0 / (1.0 + np.exp(-4.0 * x[:, 0]))
        return scale * (1.0 + (ratio - 1.0) * w) * (rng.standard_exponential(n) - 1.0)
    raise ConfigError(f"unknown noise shape {shape_name!r}")


def _fourier_function(rng, dim: int, lengthscale: float, n_features: int = 500):
    """A fixed function approximately distributed as an RBF-kernel GP draw."""
    w = rng.standard_normal((dim, n_features)) / lengthscale
    b = rng.uniform(0.0, 2.0 * math.pi, n_features)
    a = rng.standard_normal(n_features) * math.sqrt(2.0 / n_features)
    return lambda x: np.cos(x @ w + b) @ a


NOISE_SHAPES = ("gaussian", "skewed", "heteroscedastic", "skewed-heteroscedastic")


def gen_gp_tasks(
    n_tasks: int,
    n_instances: int,
    dim: int = 1,
    lengthscale_range: tuple[float, float] = (0.5, 2.0),
    noise_shape: str = "gaussian",
    noise_std: float | tuple[float, float] = 0.1,
    noise_ratio: float = 3.0,
    amplitude_range: tuple[float, float] = (1.0, 1.0),
    input_range: tuple[float, float] = (-2.0, 2.0),
    shared_fraction: float = 0.0,
    shared_lengthscale: float = 1.0,
    seed: int = 0,
) -> TaskCollection:
    """Tasks whose latent function is a draw from an RBF-kernel GP prior.

    Each task draws its own length-scale (and amplitude, noise level when a
    range is given) uniformly from the configured ranges.  ``noise_shape``
    chooses between Gaussian, centred-exponential (skewed), input-dependent
    (heteroscedastic, std rising ``noise_ratio``-fold along the first feature)
    and the skewed heteroscedastic combination.

    With ``shared_fraction`` > 0 that share of the latent variance comes from
    one function common to every task (an RBF GP draw with
    ``shared_lengthscale``, via random Fourier features), so the tasks are
    related and there is structure to meta-learn.
    """
    if n_tasks < 1 or n_instances < 1 or dim < 1:
        raise ConfigError("n_tasks, n_instances and dim must be positive")
    if noise_shape not in NOISE_SHAPES:
        raise ConfigError(f"unknown noise shape {noise_shape!r}; expected one of {NOISE_SHAPES}")
    lo_std, hi_std = (noise_std, noise_std) if np.isscalar(noise_std) else noise_std
    if lo_std < 0 or hi_std < lo_std:
        raise ConfigError("noise_std must be non-negative (or an ordered range)")
    if not 0.0 <= shared_fraction <= 1.0:
        raise ConfigError("shared_fraction must lie in [0, 1]")
    # children 0..T-1 drive the tasks; child T (only used when sharing) the common function
    seqs = np.random.SeedSequence(seed).spawn(n_tasks + 1)
    shared = _fourier_function(np.random.default_rng(seqs[-1]), dim, shared_lengthscale) if shared_fraction else None
    tasks = []
    for t, task_seq in enumerate(seqs[:n_tasks]):
        # latent and noise come from separate streams so the noise shape never shifts the latent draw
        rng, noise_rng = (np.random.default_rng(s) for s in task_seq.spawn(2))
        x = rng.uniform(*input_range, size=(n_instances, dim))
        ell = rng.uniform(*lengthscale_range)
        amp = rng.uniform(*amplitude_range)
        k = _rbf_gram(x, ell) + 1e-8 * np.eye(n_instances)
        latent = np.linalg.cholesky(k) @ rng.standard_normal(n_instances)
        if shared is not None:
            latent = math.sqrt(1.0 - shared_fraction) * latent + math.sqrt(shared_fraction) * shared(x)
        latent = amp * latent
        scale = rng.uniform(lo_std, hi_std)
        y = latent + _noise(noise_rng, noise_shape, x, scale, noise_ratio)
        tasks.append(TaskDataset(f"gp-{t:04d}", x, y))
    return TaskCollection(tuple(tasks))


def gen_sine_tasks(
    n_tasks: int,
    n_instances: int,
    amplitude_range: tuple[float, float] = (0.1, 5.0),
    phase_range: tuple[float, float] = (0.0, math.pi),
    frequency_range: tuple[float, float] = (1.0, 1.0),
    input_range: tuple[float, float] = (-5.0, 5.0),
    noise_std: float = 0.0,
    seed: int = 0,
) -> TaskCollection:
    """Tasks ``y = a sin(w x + phi) + noise`` with per-task a, w, phi."""
    if n_tasks < 1 or n_instances < 1:
        raise ConfigError("n_tasks and n_instances must be positive")
    if noise_std < 0:
        raise ConfigError("noise_std must be non-negative")
    rng = np.random.default_rng(seed)
    tasks = []
    for t in range(n_tasks):
        a = rng.uniform(*amplitude_range)
        phi = rng.uniform(*phase_range)
        w = rng.uniform(*frequency_range)
        x = rng.uniform(*input_range, size=(n_instances, 1))
        y = a * np.sin(w * x[:, 0] + phi) + noise_std * rng.standard_normal(n_instances)
        tasks.append(TaskDataset(f"sine-{t:04d}", x, y))
    return TaskCollection(tuple(tasks))


# CSV

@dataclass(frozen=True)
class CsvSchema:
    task_column: str
    feature_columns: tuple[str, ...]
    target_column: str

    def __post_init__(self):
        object.__setattr__(self, "feature_columns", tuple(self.feature_columns))


def load_csv_multitask(path, schema: CsvSchema, min_task_size: int = 1) -> TaskCollection:
    """Read a CSV with one instance per row and group rows by task id.

    Tasks with fewer than ``min_task_size`` rows are dropped with a warning.
    Task order follows first appearance in the file.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        wanted = [schema.task_column, *schema.feature_columns, schema.target_column]
        for col in wanted:
            if col not in header:
                raise SchemaError(f"column {col!r} not found in {path.name} (header: {header})")
        groups: dict[str, tuple[list, list]] = {}
        for lineno, row in enumerate(reader, start=2):
            key = row[schema.task_column]
            try:
                feats = [float(row[c]) for c in schema.feature_columns]
                target = float(row[schema.target_column])
            except (TypeError, ValueError):
                raise ParseError(f"{path.name}: non-numeric cell in row {lineno}") from None
            xs, ys = groups.setdefault(key, ([], []))
            xs.append(feats)
            ys.append(target)
    tasks = []
    for key, (xs, ys) in groups.items():
        if len(ys) < min_task_size:
            warnings.warn(
                f"dropping task {key!r}: {len(ys)} rows < minimum {min_task_size}",
                stacklevel=2,
            )
            continue
        tasks.append(TaskDataset(key, np.array(xs).reshape(len(ys), -1), np.array(ys)))
    if not tasks:
        raise ConfigError(f"no task in {path.name} has at least {min_task_size} rows")
    return TaskCollection(tuple(tasks))


def write_csv_multitask(path, collection: Iterable[TaskDataset], schema: CsvSchema) -> None:
    """Export tasks in the layout read by :func:`load_csv_multitask`."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([schema.task_column, *schema.feature_columns, schema.target_column])
        for task in collection:
            if task.dim != len(schema.feature_columns):
                raise SchemaError(
                    f"task {task.task_id} has {task.dim} features, schema names {len(schema.feature_columns)}"
                )
            for x, y in zip(task.features, task.targets):
                w.writerow([task.task_id, *(repr(float(v)) for v in x), repr(float(y))])


# standardisation

@dataclass(frozen=True)
class Standardizer:
    """Affine feature/target transform.  ``per_task`` maps task id to its own
    statistics; otherwise the global statistics apply to every task."""

    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float
    per_task: dict | None = None

    def _stats(self, task_id: str):
        if self.per_task is not None and task_id in self.per_task:
            return self.per_task[task_id]
        return self.x_mean, self.x_scale, self.y_mean, self.y_scale

    def apply(self, task: TaskDataset) -> TaskDataset:
        xm, xs, ym, ys = self._stats(task.task_id)
        return TaskDataset(task.task_id, (task.features - xm) / xs, (task.targets - ym) / ys)

    def invert(self, task: TaskDataset) -> TaskDataset:
        xm, xs, ym, ys = self._stats(task.task_id)
        return TaskDataset(task.task_id, task.features * xs + xm, task.targets * ys + ym)

    def transform_features(self, x: np.ndarray, task_id: str = "") -> np.ndarray:
        xm, xs, _, _ = self._stats(task_id)
        return (np.asarray(x, dtype=np.float64) - xm) / xs

    def transform_targets(self, y, task_id: str = ""):
        _, _, ym, ys = self._stats(task_id)
        return (np.asarray(y, dtype=np.float64) - ym) / ys

    def invert_targets(self, y, task_id: str = ""):
        _, _, ym, ys = self._stats(task_id)
        return np.asarray(y, dtype=np.float64) * ys + ym

    def to_dict(self) -> dict:
        if self.per_task is not None:
            raise ValueError("only global standardisation is stored in checkpoints")
        return {
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["x_mean"], dtype=np.float64), np.array(d["x_scale"], dtype=np.float64),
                   float(d["y_mean"]), float(d["y_scale"]))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim), 0.0, 1.0)


def _moments(x: np.ndarray, y: np.ndarray, label: str):
    xm = x.mean(axis=0)
    xs = x.std(axis=0)
    ym = float(y.mean())
    ys = float(y.std())
    for j in np.flatnonzero(xs == 0):
        warnings.warn(f"{label}: feature {j} has zero variance; centring only", stacklevel=3)
    xs = np.where(xs == 0, 1.0, xs)
    if ys == 0:
        warnings.warn(f"{label}: target has zero variance; centring only", stacklevel=3)
        ys = 1.0
    return xm, xs, ym, ys


def standardize(collection: TaskCollection, policy: str = "global") -> tuple[TaskCollection, Standardizer]:
    """Shift/scale features and targets to zero mean and unit variance.

    ``global`` pools the meta-train tasks (all tasks if none are tagged) and
    applies the frozen statistics everywhere; ``per-task`` uses each task's
    own statistics.
    """
    if policy == "global":
        fit = collection.split("meta-train") or list(collection.tasks)
        x = np.concatenate([t.features for t in fit])
        y = np.concatenate([t.targets for t in fit])
        st = Standardizer(*_moments(x, y, "global"))
    elif policy == "per-task":
        stats = {t.task_id: _moments(t.features, t.targets, f"task {t.task_id}") for t in collection}
        dim = collection.dim
        st = Standardizer(np.zeros(dim), np.ones(dim), 0.0, 1.0, per_task=stats)
    else:
        raise ConfigError(f"unknown standardisation policy {policy!r}")
    tasks = tuple(st.apply(t) for t in collection)
    return TaskCollection(tasks, collection.assignment), st


# splitting

def split_tasks(
    collection: TaskCollection,
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> TaskCollection:
    """Tag tasks meta-train / meta-val / meta-test uniformly at random.

    Counts are ``round(f * T)`` for the first two splits, the remainder for
    the last, with every split given at least one task.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ConfigError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(collection)
    if n < 3:
        raise ConfigError(f"need at least 3 tasks to split, got {n}")
    n_train = min(max(1, round(fractions[0] * n)), n - 2)
    n_val = min(max(1, round(fractions[1] * n)), n - n_train - 1)
    order = np.random.default_rng(seed).permutation(n)
    tags = [None] * n
    for rank, i in enumerate(order):
        tags[i] = SPLITS[0] if rank < n_train else SPLITS[1] if rank < n_train + n_val else SPLITS[2]
    return TaskCollection(collection.tasks, tuple(tags))
