"""
AdamW with decoupled weight decay and a cosine learning-rate schedule.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Tuple

import numpy as np

from app.exception.exce import ConfigError, ShapeMismatch, StepOutOfRange

Params = Dict[str, np.ndarray]

DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8
DEFAULT_WEIGHT_DECAY = 0.05
DEFAULT_BASE_LR = 1e-5


@dataclass(frozen=True)
class CosineSchedule:
    base_lr: float
    total_steps: int
    min_lr: float = 0.0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 <= self.min_lr <= self.base_lr:
            raise ConfigError(f"need 0 <= min_lr <= base_lr, got {self.min_lr}")


def lr_at(s: CosineSchedule, step: int) -> float:
    if not 0 <= step <= s.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {s.total_steps}]")
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + math.cos(math.pi * step / s.total_steps))


@dataclass(frozen=True)
class AdamWState:
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    base_lr: float = DEFAULT_BASE_LR

    @classmethod
    def zeros_like(cls, params: Params, **hyper) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
            v={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
            **hyper,
        )


def _check_shapes(state: AdamWState, params: Params, grads: Params) -> None:
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeMismatch(
            f"parameter names differ: params={sorted(params)} grads={sorted(grads)} "
            f"state={sorted(state.m)}"
        )
    for k, p in params.items():
        if np.shape(p) != np.shape(grads[k]) or np.shape(p) != state.m[k].shape:
            raise ShapeMismatch(f"{k}: param {np.shape(p)} grad {np.shape(grads[k])}")


def adamw_apply(
    state: AdamWState, params: Params, grads: Params, lr: float
) -> Tuple[Params, AdamWState]:
    """One AdamW step; returns (new params, new state). Inputs are not mutated.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
    """
    if lr < 0:
        raise ConfigError(f"lr must be >= 0, got {lr}")
    _check_shapes(state, params, grads)

    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**step
    correction2 = 1.0 - b2**step

    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[k], dtype=np.float64)
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        new_params[k] = p - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p)
        new_m[k], new_v[k] = m, v

    return new_params, replace(state, step=step, m=new_m, v=new_v)
