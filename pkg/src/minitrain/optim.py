"""Parameter updates: momentum SGD with coupled weight decay, gradient
centralization, the sharpness-aware two-step wrapper, and the LR schedule.

Per-step flow is fixed: backward -> (centralize) -> (ascend, re-backward,
centralize) -> decay -> momentum -> update. Weight decay enters the gradient
as +2*lambda*w (the quadratic penalty added to the loss, differentiated), and
batchnorm scales/shifts and biases are exempt.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .models import ParamSet
from .tensor import ConfigError


class OptimizerAbort(RuntimeError):
    """A step hit non-finite numbers; carries the offending parameter name."""


@dataclass
class OptConfig:
    lr_peak: float = 0.4
    momentum: float = 0.9
    decay: float = 0.0  # lambda in the quadratic weight penalty
    rho: float = 0.05  # sharpness neighborhood radius
    gc_enabled: bool = False
    sam_enabled: bool = False
    schedule: str = "onecycle"  # "onecycle" | "constant"
    warmup_fraction: float = 0.2
    total_steps: int = 1

    def __post_init__(self):
        if self.lr_peak <= 0:
            raise ConfigError(f"lr_peak must be positive, got {self.lr_peak}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.rho < 0:
            raise ConfigError(f"rho must be >= 0, got {self.rho}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.schedule not in ("onecycle", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must be in (0,1), got {self.warmup_fraction}")


@dataclass
class OptState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    sam_backup: dict[str, np.ndarray] = field(default_factory=dict)
    step_index: int = 0

    @classmethod
    def create(cls, params: ParamSet) -> "OptState":
        return cls(velocity={e.name: np.zeros_like(e.tensor.data) for e in params})


def centralize_gradients(params: ParamSet) -> None:
    """Subtract the per-output-slice mean from every multi-axis gradient.

    For a conv kernel [Cout, Cin, kH, kW] the mean is over the trailing three
    axes per output channel; for a linear weight [K, D], over D per row.
    Single-axis parameters are left untouched. Idempotent.
    """
    for e in params:
        if not e.gc_eligible:
            continue
        g = e.tensor.grad
        if g is None:
            raise OptimizerAbort(f"centralize_gradients: parameter {e.name} has no gradient")
        axes = tuple(range(1, g.ndim))
        g -= g.mean(axis=axes, keepdims=True)


def sgd_step(params: ParamSet, state: OptState, lr: float, cfg: OptConfig) -> None:
    """One momentum-SGD update from the gradients currently in place."""
    for e in params:
        g = e.tensor.grad
        if g is None:
            raise OptimizerAbort(f"sgd_step: parameter {e.name} has no gradient")
        if not np.isfinite(g).all():
            raise OptimizerAbort(f"sgd_step: non-finite gradient in parameter {e.name}")
        if cfg.decay and not e.decay_exempt:
            g = g + (2.0 * cfg.decay) * e.tensor.data
        v = state.velocity[e.name]
        v *= cfg.momentum
        v += g
        e.tensor.data -= lr * v
    state.step_index += 1


def _global_grad_norm(params: ParamSet) -> float:
    sq = 0.0
    for e in params:
        if e.tensor.grad is not None:
            sq += float(np.vdot(e.tensor.grad, e.tensor.grad))
    return float(np.sqrt(sq))


def sam_step(
    params: ParamSet,
    state: OptState,
    lr: float,
    cfg: OptConfig,
    closure: Callable[[], float],
) -> tuple[float, float]:
    """Sharpness-aware two-step update.

    ``closure`` zeroes gradients, recomputes the loss at the current
    parameters, runs backward, and returns the loss value. The step ascends by
    rho * g / ||g||2 (one global norm over all trainable gradients), re-runs
    the closure at the perturbed point, restores the saved parameters exactly,
    and descends with the perturbed-point gradients. With a zero gradient or
    rho == 0 it degenerates to a plain sgd_step.

    Returns (loss at the original point, loss at the perturbed point).
    """
    loss0 = closure()
    if cfg.gc_enabled:
        centralize_gradients(params)

    gnorm = _global_grad_norm(params)
    if cfg.rho == 0.0 or gnorm == 0.0:
        sgd_step(params, state, lr, cfg)
        return loss0, loss0

    scale = cfg.rho / gnorm
    state.sam_backup = {e.name: e.tensor.data.copy() for e in params}
    for e in params:
        e.tensor.data += scale * e.tensor.grad

    loss1 = closure()
    if not np.isfinite(loss1):
        for e in params:
            e.tensor.data[...] = state.sam_backup[e.name]
        raise OptimizerAbort(f"sam_step: non-finite loss {loss1} at perturbed point")
    if cfg.gc_enabled:
        centralize_gradients(params)

    # Bit-exact restore before the descent update.
    for e in params:
        e.tensor.data[...] = state.sam_backup[e.name]
    sgd_step(params, state, lr, cfg)
    return loss0, loss1


def schedule_lr(cfg: OptConfig, step: int) -> float:
    """Learning rate at a given step; out-of-range steps clamp to endpoints."""
    if cfg.schedule == "constant":
        return cfg.lr_peak
    step = min(max(step, 0), cfg.total_steps)
    peak_at = cfg.warmup_fraction * cfg.total_steps
    if step <= peak_at:
        return cfg.lr_peak * (step / peak_at if peak_at > 0 else 1.0)
    return cfg.lr_peak * (cfg.total_steps - step) / (cfg.total_steps - peak_at)


def train_step(
    params: ParamSet,
    state: OptState,
    lr: float,
    cfg: OptConfig,
    closure: Callable[[], float],
) -> float:
    """Dispatch one update through SAM or plain SGD; returns the batch loss."""
    if cfg.sam_enabled:
        loss0, _ = sam_step(params, state, lr, cfg, closure)
        return loss0
    loss = closure()
    if cfg.gc_enabled:
        centralize_gradients(params)
    sgd_step(params, state, lr, cfg)
    return loss
