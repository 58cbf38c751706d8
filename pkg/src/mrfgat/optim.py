"""
Adam optimizer state and update, plus the step-decay learning-rate schedule.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable

import numpy as np

from .autodiff import Parameter
from .errors import ValidationError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    """Per-parameter moment accumulators keyed by parameter name."""

    learning_rate: float = 1e-3
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValidationError(f"learning rate must be positive, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.step < 0:
            raise ValidationError(f"step counter must be non-negative, got {self.step}")


def adam_step(params: Iterable[Parameter], state: AdamState) -> None:
    """
    Apply one bias-corrected Adam update in place, then zero the gradients.

    Moments for a parameter seen for the first time start at zero.
    """
    params = list(params)
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for param in params:
        grad = param.grad
        m = state.first_moment.get(param.name)
        v = state.second_moment.get(param.name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[param.name] = m
        state.second_moment[param.name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        param.zero_grad()


def step_decay_lr(initial: float, epoch: int, factor: float, every: int) -> float:
    """Learning rate for a zero-based ``epoch``; ``every <= 0`` disables decay."""
    if every <= 0 or factor == 1.0:
        return initial
    return initial * factor ** (epoch // every)
