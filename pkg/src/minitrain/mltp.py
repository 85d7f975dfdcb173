"""Two-task meta-learning training: split the subset into class-balanced
halves, adapt a deep-copied snapshot on each task, and pull the shared weights
toward the mean of the adapted weights (first-order interpolation).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset, batch_iterator
from .models import Model, ParamSet
from .optim import OptConfig, OptState, schedule_lr, train_step
from .tensor import ConfigError, ShapeError
from .train import BudgetClock, calibrate_batchnorm, make_closure

log = logging.getLogger(__name__)


@dataclass
class TaskSplit:
    tasks: list[Dataset]
    per_class_per_task: int
    seed: int


@dataclass
class MltpConfig:
    inner_opt: OptConfig
    inner_steps: Optional[int] = None  # None -> one epoch over the task
    inner_lr: Optional[float] = None  # None -> follow inner_opt's schedule
    beta: float = 0.5  # outer interpolation rate
    meta_iterations: int = 1
    batch_size: int = 256
    ls_alpha: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must be in (0,1], got {self.beta}")
        if self.meta_iterations < 1:
            raise ConfigError(f"meta_iterations must be >= 1, got {self.meta_iterations}")
        if self.inner_steps is not None and self.inner_steps < 1:
            raise ConfigError(f"inner_steps must be >= 1, got {self.inner_steps}")


def split_tasks(ds: Dataset, seed: int, num_tasks: int = 2) -> TaskSplit:
    """Split into disjoint class-balanced tasks; odd remainders are dropped."""
    rng = np.random.default_rng(seed)
    per_task: list[list[np.ndarray]] = [[] for _ in range(num_tasks)]
    per_class = None
    for c in np.unique(ds.labels):
        members = np.nonzero(ds.labels == c)[0]
        if members.size < num_tasks:
            raise ValueError(f"class {c} has only {members.size} samples, need {num_tasks}")
        rng.shuffle(members)
        quota = members.size // num_tasks
        if quota * num_tasks != members.size:
            log.warning("class %d: dropping %d samples to balance the split",
                        c, members.size - quota * num_tasks)
        per_class = quota if per_class is None else min(per_class, quota)
        for t in range(num_tasks):
            per_task[t].append(members[t * quota : (t + 1) * quota])
    tasks = []
    for t in range(num_tasks):
        idx = np.concatenate(per_task[t])
        rng.shuffle(idx)
        tasks.append(Dataset(images=ds.images[idx].copy(), labels=ds.labels[idx].copy(),
                             split=ds.split, source_digest=ds.source_digest))
    return TaskSplit(tasks=tasks, per_class_per_task=per_class, seed=seed)


def inner_loop(
    model: Model,
    params: ParamSet,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: MltpConfig,
    step_offset: int = 0,
    epoch: int = 0,
    shuffle_seed: int = 0,
) -> tuple[dict[str, np.ndarray], list[float]]:
    """Adapt a snapshot of the shared weights on one task.

    The shared parameters and batchnorm stats are restored bit-exactly before
    returning; only the adapted values leave this function. Momentum starts
    fresh for every adaptation.
    """
    shared = params.snapshot()
    bn_saved = [st.copy() for st in model.bn_states()]
    state = OptState.create(params)
    state.step_index = step_offset

    steps_target = cfg.inner_steps
    if steps_target is None:
        steps_target = max(1, int(np.ceil(len(labels) / cfg.batch_size)))
    losses: list[float] = []
    sub_epoch = 0
    while len(losses) < steps_target:
        for idx in batch_iterator(len(labels), cfg.batch_size, shuffle=True,
                                  seed=shuffle_seed, epoch=epoch * 1000 + sub_epoch):
            if len(losses) >= steps_target:
                break
            lr = cfg.inner_lr if cfg.inner_lr is not None else schedule_lr(cfg.inner_opt, state.step_index)
            losses.append(train_step(params, state, lr, cfg.inner_opt,
                                     make_closure(model, params, images[idx], labels[idx], cfg.ls_alpha)))
        sub_epoch += 1

    adapted = params.snapshot()
    params.load(shared)
    for st, saved in zip(model.bn_states(), bn_saved):
        st.running_mean[...] = saved.running_mean
        st.running_var[...] = saved.running_var
    return adapted, losses


def meta_update(params: ParamSet, adapted: list[dict[str, np.ndarray]], beta: float) -> float:
    """Pull shared weights toward the adapted sets: w += beta * mean(w_t - w).

    Returns the L2 norm of the applied delta.
    """
    sq = 0.0
    for e in params:
        deltas = []
        for a in adapted:
            if a[e.name].shape != e.tensor.shape:
                raise ShapeError(f"meta_update: {e.name} shape {a[e.name].shape} != {e.tensor.shape}")
            deltas.append(a[e.name] - e.tensor.data)
        step = beta * np.mean(deltas, axis=0)
        e.tensor.data += step
        sq += float(np.vdot(step, step))
    return float(np.sqrt(sq))


def mltp_train(
    model: Model,
    params: ParamSet,
    tasks: list[tuple[np.ndarray, np.ndarray]],
    cfg: MltpConfig,
    budget: Optional[BudgetClock] = None,
    calibration_images: Optional[np.ndarray] = None,
    on_round=None,
) -> list[dict]:
    """Run meta-iterations of {adapt each task; interpolate}; returns history.

    Budget handling: a round that finishes past the budget is rolled back to
    the previous round boundary, and no round starts if its predicted duration
    (max observed so far) exceeds the remaining budget. After training, the
    batchnorm running stats are recalibrated over ``calibration_images``.
    """
    history: list[dict] = []
    steps_per_round = cfg.inner_steps
    if steps_per_round is None:
        steps_per_round = max(1, int(np.ceil(max(len(t[1]) for t in tasks) / cfg.batch_size)))
    max_round_time = 0.0
    step_offset = 0
    for rnd in range(cfg.meta_iterations):
        if budget is not None and not budget.should_start(max_round_time):
            break
        rollback = params.snapshot()
        bn_rollback = [st.copy() for st in model.bn_states()]
        t0 = time.monotonic()
        adapted, task_losses = [], []
        for t, (imgs, labs) in enumerate(tasks):
            a, losses = inner_loop(model, params, imgs, labs, cfg,
                                   step_offset=step_offset, epoch=rnd,
                                   shuffle_seed=1000 + t)
            adapted.append(a)
            task_losses.append(float(np.mean(losses)))
        delta_norm = meta_update(params, adapted, cfg.beta)
        max_round_time = max(max_round_time, time.monotonic() - t0)
        if budget is not None and budget.exceeded():
            params.load(rollback)
            for st, saved in zip(model.bn_states(), bn_rollback):
                st.running_mean[...] = saved.running_mean
                st.running_var[...] = saved.running_var
            break
        step_offset += steps_per_round
        record = {"round": rnd, "task_losses": task_losses, "delta_norm": delta_norm}
        history.append(record)
        if on_round is not None:
            on_round(record)
    if calibration_images is not None and len(calibration_images):
        calibrate_batchnorm(model, calibration_images, batch_size=cfg.batch_size)
    return history
