"""AdamW with decoupled weight decay and a linear warm-up schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn import Parameter


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    @classmethod
    def for_params(cls, params: Sequence[Parameter], **hyper) -> OptimizerState:
        state = cls(**hyper)
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
        return state


def warmup_lr(base_lr: float, step: int, warmup_steps: int = 10) -> float:
    """Linear warm-up to ``base_lr`` over ``warmup_steps``, then constant."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


def adamw_step(params: Sequence[Parameter], state: OptimizerState, lr: float | None = None) -> OptimizerState:
    """Apply one AdamW update in place, bump ``state.step`` and clear grads."""
    if len(state.first_moment) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '<unnamed>'} has no gradient")
    state.step += 1
    t = state.step
    lr = state.learning_rate if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        g = p.grad
        if m.shape != p.data.shape:
            raise ValueError(f"moment shape {m.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data * (1.0 - lr * state.weight_decay) - lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        p.grad = None
    return state


class AdamW:
    """Stateful convenience wrapper: ``opt.step()`` after ``loss.backward()``."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, weight_decay: float = 0.05,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, warmup_steps: int = 10):
        self.params = list(params)
        self.state = OptimizerState.for_params(
            self.params, learning_rate=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], epsilon=eps
        )
        self.warmup_steps = warmup_steps

    def current_lr(self) -> float:
        return warmup_lr(self.state.learning_rate, self.state.step + 1, self.warmup_steps)

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        adamw_step(self.params, self.state, lr=self.current_lr())
