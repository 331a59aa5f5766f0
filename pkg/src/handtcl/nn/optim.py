"""Adam and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidConfig, ShapeMismatch

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class TrainSchedule:
    base_lr: float = 1e-3
    warmup_epochs: float = 10
    total_epochs: float = 50
    batch_size: int = 32
    steps_per_epoch: int | None = None  # None: one pass over the stage's items

    def __post_init__(self):
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise InvalidConfig("need 0 <= warmup_epochs <= total_epochs")
        if self.batch_size < 1 or self.base_lr < 0:
            raise InvalidConfig("batch_size must be >= 1 and base_lr >= 0")


def lr_at(epoch, schedule: TrainSchedule):
    """Linear warmup from 0, then cosine decay to 0 at ``total_epochs``."""
    base, warm, total = schedule.base_lr, schedule.warmup_epochs, schedule.total_epochs
    if epoch >= total:
        return 0.0
    if epoch < warm:
        return base * epoch / warm
    if total == warm:
        return base
    progress = (epoch - warm) / (total - warm)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr):
    """One in-place Adam update of ``params`` (name -> Tensor) from ``grads`` (name -> array)."""
    state.step += 1
    b1t = 1.0 - BETA1**state.step
    b2t = 1.0 - BETA2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise ShapeMismatch(f"optimizer state for {name} does not match the parameter")
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * v + (1 - BETA2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / b1t) / (np.sqrt(v / b2t) + EPS)
        p.data = (p.data - update).astype(p.data.dtype)
    return params, state
