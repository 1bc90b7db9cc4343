"""AdamW with decoupled weight decay, plus the learning-rate schedules and
update-frequency throttling used for pretraining, finetuning and online
adaptation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import Params


@dataclass
class ScheduleConfig:
    kind: str = "constant"  # constant | warmup_cosine
    warmup_steps: int = 0
    total_steps: int = 0
    max_lr: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("constant", "warmup_cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "warmup_cosine" and self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")


def lr_at(step: int, schedule: ScheduleConfig) -> float:
    """Learning rate at ``step``: linear warmup to max_lr, cosine decay to
    zero at total_steps, clamped to zero beyond."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if schedule.kind == "constant":
        return schedule.max_lr
    if step < schedule.warmup_steps:
        return schedule.max_lr * step / schedule.warmup_steps
    if step >= schedule.total_steps:
        return 0.0
    frac = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.max_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamWState:
    """First/second moments per trainable tensor plus the shared step count.

    Weight decay is decoupled: theta <- theta - lr * wd * theta, applied
    independently of the gradient term. Moments exist only for trainable
    parameters.
    """

    def __init__(
        self,
        params: Params,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        clip_norm: Optional[float] = None,
    ):
        if lr < 0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step = 0
        self.skipped = 0
        self.m = {n: np.zeros_like(params[n].data) for n in params.trainable_names()}
        self.v = {n: np.zeros_like(params[n].data) for n in params.trainable_names()}

    def snapshot(self) -> dict:
        return {
            "step": self.step,
            "m": {n: a.copy() for n, a in self.m.items()},
            "v": {n: a.copy() for n, a in self.v.items()},
        }

    def restore(self, snap: dict) -> None:
        self.step = snap["step"]
        for n in self.m:
            self.m[n] = snap["m"][n].copy()
            self.v[n] = snap["v"][n].copy()


def adamw_step(params: Params, state: AdamWState, lr: Optional[float] = None) -> bool:
    """Apply one AdamW update from the gradients stored on ``params``.

    Returns False (update skipped entirely, ``state.skipped`` bumped) when any
    gradient is non-finite, which signals divergence upstream.
    """
    lr = state.lr if lr is None else lr
    grads = {}
    for name in state.m:
        g = params[name].grad
        if g is None:
            raise ValueError(f"missing gradient for trainable parameter {name}")
        if not np.isfinite(g).all():
            state.skipped += 1
            return False
        grads[name] = g

    if state.clip_norm is not None:
        total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        if total > state.clip_norm:
            factor = state.clip_norm / total
            grads = {n: g * g.dtype.type(factor) for n, g in grads.items()}

    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, g in grads.items():
        t = params[name]
        dt = t.data.dtype.type
        if state.weight_decay:
            t.data = t.data - dt(lr * state.weight_decay) * t.data
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        t.data = t.data - (dt(lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))).astype(t.data.dtype)
    return True


def throttled_update(increment_index: int, frequency: int) -> bool:
    """True when this increment should backprop and update; skipped increments
    run forward-only so the compute saving is real."""
    if frequency < 1:
        raise ValueError(f"update frequency must be >= 1, got {frequency}")
    if increment_index < 0:
        raise ValueError(f"increment index must be >= 0, got {increment_index}")
    return increment_index % frequency == frequency - 1
