"""AdamW with decoupled weight decay, and the warmup+cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["OptimizerState", "adamw_step", "lr_schedule"]


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus shared hyperparameters.

    ``m``/``v`` are keyed by parameter name and hold arrays of the same
    shape and dtype as the parameter. ``t`` counts completed steps.
    """

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    eps: float = 1e-8

    @classmethod
    def init(cls, params, beta1: float = 0.9, beta2: float = 0.95,
             weight_decay: float = 0.1, eps: float = 1e-8) -> "OptimizerState":
        state = cls(beta1=beta1, beta2=beta2, weight_decay=weight_decay, eps=eps)
        for name, p in params.items():
            arr = p.data if hasattr(p, "data") else np.asarray(p)
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def adamw_step(params, grads, state: OptimizerState, lr: float):
    """One bias-corrected AdamW update, in place.

    ``params`` maps name -> Tensor (or array); ``grads`` maps name -> array.
    Weight decay is decoupled: it scales the parameter directly and never
    enters the moments. Parameters without a gradient entry are skipped
    entirely, decay included.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        arr = p.data if hasattr(p, "data") else p
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay != 0.0:
            arr *= 1.0 - lr * state.weight_decay  # decay acts on the pre-step value
        arr -= lr * update
    return params, state


def lr_schedule(step: float, warmup_samples: float, total_samples: float,
                peak: float, minimum: float) -> float:
    """Linear ramp 0->peak over warmup, cosine peak->minimum at total, then flat."""
    if step < warmup_samples:
        return peak * (step / warmup_samples)
    if step >= total_samples:
        return minimum
    frac = (step - warmup_samples) / (total_samples - warmup_samples)
    return minimum + (peak - minimum) * 0.5 * (1.0 + math.cos(math.pi * frac))
