"""Episodic meta-training of the shared parameters.

Each step samples tasks with replacement, draws a disjoint support/query
episode from each, adapts and calibrates on the support, scores the query set
with the total loss and takes one Adam step on the batch-mean loss.  The
parameters with the lowest meta-validation loss are returned.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .calibration import DEFAULT, Variant
from .data import ConfigError, TaskDataset
from .losses import episode_losses
from .model import SharedParams, init_params
from .numerics import tape as nx


class SamplingError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Episode:
    support: TaskDataset
    query: TaskDataset


@dataclass(frozen=True)
class TrainConfig:
    support_size: int = 10
    query_size: int = 30
    batch_tasks: int = 32
    learning_rate: float = 1e-2
    max_epochs: int = 1000
    early_stop_patience: int = 50
    lam: float = 0.5
    seed: int = 0
    val_episodes_per_task: int = 4

    def __post_init__(self):
        if self.support_size < 1 or self.query_size < 1:
            raise ConfigError("support_size and query_size must be at least 1")
        if self.batch_tasks < 1 or self.max_epochs < 0 or self.early_stop_patience < 1:
            raise ConfigError("batch_tasks and early_stop_patience must be positive, max_epochs >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float | None
    val_loss: float
    wall_time: float


@dataclass
class TrainTrace:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf

    def to_records(self) -> list[dict]:
        """Deterministic part of the trace (no wall-clock times)."""
        return [{"epoch": r.epoch, "train_loss": r.train_loss, "val_loss": r.val_loss} for r in self.records]


def sample_episode(dataset: TaskDataset, support_size: int, query_size: int,
                   rng: np.random.Generator) -> Episode:
    """Disjoint support and query drawn uniformly without replacement."""
    need = support_size + query_size
    if len(dataset) < need:
        raise SamplingError(
            f"task {dataset.task_id} has {len(dataset)} instances, episode needs {need}"
        )
    idx = rng.permutation(len(dataset))[:need]
    return Episode(dataset.take(idx[:support_size]), dataset.take(idx[support_size:]))


def stack_episodes(episodes: Sequence[Episode]):
    """Arrays ``(xs, ys, xq, yq)`` with a leading episode axis."""
    xs = np.stack([e.support.features for e in episodes])
    ys = np.stack([e.support.targets for e in episodes])
    xq = np.stack([e.query.features for e in episodes])
    yq = np.stack([e.query.targets for e in episodes])
    return xs, ys, xq, yq


class Adam:
    """Adam with bias correction; one moment pair per named parameter array."""

    def __init__(self, lr: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: SharedParams, grads: dict) -> SharedParams:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        out = {}
        for name, p in params.arrays.items():
            g = grads[name]
            m = self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return SharedParams(params.feature_dim, out)


def loss_and_grad(params: SharedParams, episodes: Sequence[Episode], lam: float,
                  variant: Variant = DEFAULT) -> tuple[float, dict]:
    """Batch-mean total loss and its gradient w.r.t. every shared parameter."""
    tape = nx.Tape()
    w = params.on_tape(tape)
    try:
        losses = episode_losses(w, *stack_episodes(episodes), lam, variant)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        raise TrainingError(_diagnose(params, episodes, lam, variant, exc)) from exc
    bad = np.flatnonzero(~np.isfinite(losses.value))
    if bad.size:
        raise TrainingError(f"non-finite loss on episode {bad[0]} (task {episodes[bad[0]].support.task_id})")
    loss = nx.mean(losses)
    grads = tape.backward(loss, [w[k] for k in params.names])
    return float(loss.value), dict(zip(params.names, grads))


def _diagnose(params, episodes, lam, variant, exc) -> str:
    """Name the first episode whose loss cannot be computed on its own."""
    for i, ep in enumerate(episodes):
        try:
            loss = episode_losses(params.arrays, *stack_episodes([ep]), lam, variant)
            if np.all(np.isfinite(loss)):
                continue
        except (ArithmeticError, ValueError, np.linalg.LinAlgError):
            pass
        return f"non-finite loss on episode {i} (task {ep.support.task_id}): {exc}"
    return f"loss evaluation failed: {exc}"


def train_step(params: SharedParams, episodes: Sequence[Episode], optimizer: Adam, lam: float,
               variant: Variant = DEFAULT) -> tuple[SharedParams, float]:
    loss, grads = loss_and_grad(params, episodes, lam, variant)
    return optimizer.step(params, grads), loss


def mean_episode_loss(params: SharedParams, episodes: Sequence[Episode], lam: float,
                      variant: Variant = DEFAULT) -> float:
    return float(np.mean(episode_losses(params.arrays, *stack_episodes(episodes), lam, variant)))


def validation_episodes(tasks: Sequence[TaskDataset], config: TrainConfig, rng: np.random.Generator) -> list[Episode]:
    return [
        sample_episode(t, config.support_size, config.query_size, rng)
        for t in tasks
        for _ in range(config.val_episodes_per_task)
    ]


def meta_train(
    train_tasks: Sequence[TaskDataset],
    val_tasks: Sequence[TaskDataset],
    config: TrainConfig = TrainConfig(),
    variant: Variant = DEFAULT,
    init: SharedParams | None = None,
    progress: Callable[[EpochRecord], None] | None = None,
) -> tuple[SharedParams, TrainTrace]:
    """Meta-train and return the best-validation parameters with the trace.

    An epoch is ``ceil(T / batch_tasks)`` steps.  Validation episodes are
    drawn once from a dedicated stream and reused every epoch.  Epoch 0 in
    the trace is the initial parameters.
    """
    train_tasks, val_tasks = list(train_tasks), list(val_tasks)
    if not train_tasks or not val_tasks:
        raise ConfigError("meta-training needs at least one training and one validation task")
    need = config.support_size + config.query_size
    for t in train_tasks + val_tasks:
        if len(t) < need:
            raise SamplingError(f"task {t.task_id} has {len(t)} instances, episodes need {need}")
    init_seq, train_seq, val_seq = np.random.SeedSequence(config.seed).spawn(3)
    params = init if init is not None else init_params(train_tasks[0].dim, np.random.default_rng(init_seq))
    rng = np.random.default_rng(train_seq)
    val_eps = validation_episodes(val_tasks, config, np.random.default_rng(val_seq))
    optimizer = Adam(config.learning_rate)
    steps = math.ceil(len(train_tasks) / config.batch_tasks)

    start = time.perf_counter()
    trace = TrainTrace()
    best = params
    val = mean_episode_loss(params, val_eps, config.lam, variant)
    trace.records.append(EpochRecord(0, None, val, time.perf_counter() - start))
    trace.best_epoch, trace.best_val_loss = 0, val
    if progress:
        progress(trace.records[-1])

    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for _ in range(steps):
            picks = rng.integers(len(train_tasks), size=config.batch_tasks)
            batch = [sample_episode(train_tasks[i], config.support_size, config.query_size, rng) for i in picks]
            params, loss = train_step(params, batch, optimizer, config.lam, variant)
            losses.append(loss)
        val = mean_episode_loss(params, val_eps, config.lam, variant)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, float(np.mean(losses)), val, time.perf_counter() - start)
        trace.records.append(rec)
        if progress:
            progress(rec)
        if val < trace.best_val_loss:
            trace.best_epoch, trace.best_val_loss, best = epoch, val, params
        elif epoch - trace.best_epoch >= config.early_stop_patience:
            break
    return best, trace
