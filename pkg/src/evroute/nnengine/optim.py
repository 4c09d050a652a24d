"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter


class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def _ensure(self, params: list[Parameter]) -> None:
        for p in params:
            if p.name not in self.m:
                self.m[p.name] = np.zeros_like(p.data)
                self.v[p.name] = np.zeros_like(p.data)


def adam_step(params: list[Parameter], state: AdamState) -> None:
    """One Adam update from the accumulated gradients; zeroes them afterward."""
    state._ensure(params)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p in params:
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()
