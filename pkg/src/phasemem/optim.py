"""Adam with bias correction, operating in place on ``dict[str, Tensor]``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, state):
    """Apply one Adam update using the ``.grad`` already stored on each parameter."""
    missing = [name for name, p in params.items() if p.requires_grad and p.grad is None]
    if missing:
        raise UsageError(f"adam_step: no gradient for {missing[:3]}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr_t = state.learning_rate * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        # eps is scaled so the update equals lr * m_hat / (sqrt(v_hat) + eps)
        p.data -= (lr_t * m / (np.sqrt(v) + state.epsilon * np.sqrt(1.0 - b2 ** t))).astype(
            p.data.dtype)


def zero_grad(params):
    for p in params.values():
        p.grad = None
