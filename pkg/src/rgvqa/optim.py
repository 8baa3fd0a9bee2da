"""Adam with bias correction and the stepped learning-rate decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], lr: float | None = None) -> None:
    """One in-place Adam update over all parameters (iterated in sorted name order)."""
    state.step_count += 1
    t = state.step_count
    lr = state.lr if lr is None else lr
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    for name in sorted(params):
        p = params[name]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_at_epoch(epoch: int, lr0: float, decay: float = 0.8, every: int = 10) -> float:
    """Stepped schedule: lr0 scaled by decay once per `every` epochs."""
    return lr0 * decay ** (epoch // every)
