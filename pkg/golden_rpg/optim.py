"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

AdamW with decoupled weight decay, global-norm gradient clipping and the
half-cosine learning-rate decay used by the training loop.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Tuple

import numpy as np

from .errors import ShapeError

Arrays = Dict[str, np.ndarray]


@dataclass(frozen=True)
class OptimState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: Arrays = field(default_factory=dict)
    v: Arrays = field(default_factory=dict)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    total_steps: int
    kind: str = "cosine"


def adamw_step(params: Arrays, grads: Arrays, state: OptimState, lr: float) -> Tuple[Arrays, OptimState]:
    """
    One decoupled-weight-decay Adam update. Inputs are left untouched, the updated
    parameters and a new state are returned.
    """
    missing = sorted(set(params) - set(grads))
    if missing:
        raise ValueError(f"Missing gradient for parameters {missing}.")
    step = state.step + 1
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step
    new_params: Arrays = {}
    new_m: Arrays = {}
    new_v: Arrays = {}
    for name in sorted(params):
        param = params[name]
        grad = grads[name]
        if grad.shape != param.shape:
            raise ShapeError(f"adamw {name}", grad.shape, param.shape)
        m = state.m.get(name, np.zeros_like(param))
        v = state.v.get(name, np.zeros_like(param))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        decayed = param - lr * state.weight_decay * param
        new_params[name] = decayed - lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, lr=lr, step=step, m=new_m, v=new_v)


def global_norm(grads: Arrays) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: Arrays, max_norm: float) -> Tuple[Arrays, float]:
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}.")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


def cosine_lr(step: int, schedule: LrSchedule) -> float:
    if schedule.kind != "cosine":
        raise ValueError(f"Unsupported schedule kind {schedule.kind}.")
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"Step {step} outside the schedule range [0, {schedule.total_steps}].")
    if schedule.total_steps == 0:
        return schedule.base_lr
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * step / schedule.total_steps))
