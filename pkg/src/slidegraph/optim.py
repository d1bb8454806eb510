"""Adam with decoupled weight decay, and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .validation import ContractError, require


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter.

    Weight decay is decoupled (applied directly to the parameter, not mixed
    into the moments) and defaults to 0; training configs opt in.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` maps parameter names to gradient arrays/Tensors; missing names
    are treated as zero gradient (decay still applies). Moment tensors are
    allocated lazily and must keep matching their parameter's shape.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, param in params.items():
        g = grads.get(name)
        g = np.zeros_like(param.data) if g is None else np.asarray(
            g.data if isinstance(g, Tensor) else g, dtype=np.float64
        )
        if g.shape != param.data.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {param.data.shape}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        m, v = state.m[name], state.v[name]
        if m.shape != param.data.shape:
            raise ContractError(f"optimizer state for {name!r} has a stale shape")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * param.data
        param.data -= lr * update


@dataclass(frozen=True)
class CosineSchedule:
    """Half-cosine decay from ``initial_lr`` at step 0 to ``floor_lr`` at
    ``total_steps``; steps outside the range clamp to the endpoints."""

    initial_lr: float
    total_steps: int
    floor_lr: float = 0.0

    def __post_init__(self):
        require(self.total_steps >= 1, "total_steps must be positive")
        require(self.floor_lr >= 0.0, "floor_lr must be non-negative")
        require(self.initial_lr >= self.floor_lr, "initial_lr must be >= floor_lr")


def cosine_lr(step: int, schedule: CosineSchedule) -> float:
    s = min(max(int(step), 0), schedule.total_steps)
    span = schedule.initial_lr - schedule.floor_lr
    return schedule.floor_lr + span * (1.0 + math.cos(math.pi * s / schedule.total_steps)) / 2.0
