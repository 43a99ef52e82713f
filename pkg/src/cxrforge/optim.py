"""Optimizers and the three-stage learning-rate schedule.

Both optimizers update parameters in place between passes (never during
one) and key their state on parameter identity, so the same instance can
drive any parameter set whose tensors stay alive across steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ScheduleSpec:
    """Linear warmup to ``peak_lr``, a plateau, then one decayed plateau."""

    peak_lr: float
    warmup_steps: int
    decay_start_step: int
    decay_factor: float

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.warmup_steps < 0 or self.decay_start_step < 0:
            raise ValueError("schedule steps must be nonnegative")
        if self.warmup_steps > self.decay_start_step:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) exceeds decay_start_step "
                f"({self.decay_start_step})"
            )
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")


def lr_at(step: int, schedule: ScheduleSpec) -> float:
    """Learning rate for a zero-based global step."""
    if step < 0:
        raise ValueError(f"step must be nonnegative, got {step}")
    if step < schedule.warmup_steps:
        return schedule.peak_lr * (step + 1) / schedule.warmup_steps
    if step < schedule.decay_start_step:
        return schedule.peak_lr
    return schedule.peak_lr * schedule.decay_factor


def _check_aligned(params: list[Tensor], grads: dict[Tensor, Tensor]) -> None:
    for p in params:
        g = grads.get(p)
        if g is None:
            raise KeyError("gradient missing for a parameter tensor")
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")


class SGD:
    """Momentum SGD: v' = momentum*v - lr*g; p' = p + v'."""

    def __init__(self, lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.lr = lr
        self.momentum = momentum
        self.step_count = 0
        self._velocity: dict[Tensor, np.ndarray] = {}

    def step(self, params: list[Tensor], grads: dict[Tensor, Tensor], lr: float | None = None):
        _check_aligned(params, grads)
        lr = self.lr if lr is None else lr
        for p in params:
            v = self._velocity.get(p)
            if v is None:
                v = np.zeros_like(p.data)
                self._velocity[p] = v
            v *= self.momentum
            v -= lr * grads[p].data
            p.data += v
        self.step_count += 1


class Adam:
    """Bias-corrected Adam; eps is added outside the square root."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError(f"betas must be in [0, 1), got {beta1}, {beta2}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: dict[Tensor, np.ndarray] = {}
        self._v: dict[Tensor, np.ndarray] = {}

    def step(self, params: list[Tensor], grads: dict[Tensor, Tensor], lr: float | None = None):
        _check_aligned(params, grads)
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p in params:
            g = grads[p].data
            m = self._m.get(p)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
                self._m[p] = m
                self._v[p] = v
            else:
                v = self._v[p]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, **hyper) -> SGD | Adam:
    if kind == "sgd":
        return SGD(**hyper)
    if kind == "adam":
        return Adam(**hyper)
    raise ValueError(f"unknown optimizer kind {kind!r} (expected 'sgd' or 'adam')")
