"""Adam and the cosine-annealed learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .autodiff import NonFiniteError, ShapeError, Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[Any, np.ndarray] = field(default_factory=dict)
    v: dict[Any, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[Any, Tensor],
    grads: Mapping[Any, Tensor | np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[Mapping[Any, Tensor], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Every gradient is checked before any parameter is touched, so a failed
    call leaves both parameters and state unchanged.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    arrays = {}
    for key, p in params.items():
        if key not in grads:
            raise KeyError(f"missing gradient for parameter {key!r}")
        g = grads[key]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient shape {g.shape} != parameter shape {p.shape} for {key!r}")
        if key in state.m and state.m[key].shape != p.shape:
            raise ShapeError(f"adam: state shape {state.m[key].shape} != parameter shape {p.shape} for {key!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam: non-finite gradient for parameter {key!r}")
        arrays[key] = g

    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step_count
    bc2 = 1.0 - b2**state.step_count
    for key, p in params.items():
        g = arrays[key]
        m = state.m.get(key)
        v = state.v.get(key)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[key], state.v[key] = m, v
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


@dataclass(frozen=True)
class CosineSchedule:
    lr_max: float = 5e-3
    lr_min: float = 1e-3
    total_steps: int = 199

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")


def cosine_lr(i: int, sched: CosineSchedule) -> float:
    if not 0 <= i <= sched.total_steps:
        raise ValueError(f"step {i} outside [0, {sched.total_steps}]")
    span = sched.lr_max - sched.lr_min
    return sched.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * i / sched.total_steps))
