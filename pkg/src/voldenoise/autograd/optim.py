"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    s: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One in-place update of every parameter that holds a gradient."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.s[name] = np.zeros_like(p.data)
        s = state.s[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        s *= state.beta2
        s += (1.0 - state.beta2) * (g * g)
        step = (state.lr / c1) * m / (np.sqrt(s / c2) + state.eps)
        p.data -= step.astype(p.data.dtype)
