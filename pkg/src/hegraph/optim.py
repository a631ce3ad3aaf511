"""Decoupled-weight-decay adaptive optimizer and the warmup-then-cosine
learning-rate schedule. The optimizer state is exclusively owned by one
training loop; `step` mutates weights and state in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatchError, StepOutOfRangeError


@dataclass
class OptimState:
    """First/second moment estimates per trainable matrix plus the shared
    step counter and hyperparameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr_base: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2

    @classmethod
    def for_params(
        cls,
        params: dict[str, np.ndarray],
        lr_base: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
    ) -> "OptimState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
            lr_base=lr_base,
            betas=betas,
            eps=eps,
            weight_decay=weight_decay,
        )


def step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimState,
    lr: float,
) -> None:
    """One update: bias-corrected adaptive moments, decay applied directly to
    the weights (decoupled) and scaled by the step's learning rate."""
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    if set(params) != set(grads) or set(params) != set(state.m):
        raise DimMismatchError("params, grads and optimizer state disagree on keys")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimMismatchError(f"grad shape {g.shape} != param shape {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay != 0.0:
            p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class Schedule:
    """Constant warmup for the first epoch(s), then cosine decay to ~0."""

    lr_base: float
    total_epochs: int
    steps_per_epoch: int
    warmup_epochs: int = 1
    warmup_lr: float = 1e-5

    def __post_init__(self):
        if self.warmup_lr > self.lr_base:
            raise ValueError("warmup_lr must not exceed lr_base")
        if self.total_epochs < self.warmup_epochs:
            raise ValueError("total_epochs must be >= warmup_epochs")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    def lr_at(self, step: int) -> float:
        if step < 0 or step >= self.total_steps:
            raise StepOutOfRangeError(
                f"step {step} outside [0, {self.total_steps})"
            )
        if step < self.warmup_steps:
            return self.warmup_lr
        span = max(1, self.total_steps - self.warmup_steps)
        progress = (step - self.warmup_steps) / span
        return self.lr_base * 0.5 * (1.0 + math.cos(math.pi * progress))
