"""AdamW with decoupled weight decay, and the warmup + cosine LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: AdamState, lr_t: float, beta1: float = 0.9,
               beta2: float = 0.999, weight_decay: float = 0.05,
               eps: float = 1e-8) -> None:
    """theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).

    Parameters without a gradient this step still receive weight decay and
    moment decay (their gradient is zero). Non-finite gradients abort.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data[...] = p.data - lr_t * (m_hat / (np.sqrt(v_hat) + eps)
                                       + weight_decay * p.data)


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear ramp 0 -> base over warmup, then cosine decay base -> 0."""
    if warmup_steps >= total_steps:
        raise ConfigError(f"warmup {warmup_steps} must be below total {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
