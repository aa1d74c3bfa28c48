"""Optimizers and learning-rate schedules over plain numpy parameter dicts."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np


def warmup_cosine(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_steps``, then cosine decay to zero.

    ``step`` is 0-based; the rate returned is the one used for that update.
    """
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


class SGD:
    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        for k, g in grads.items():
            params[k] = params[k] - lr * g


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p = params[k] * (1.0 - lr * self.weight_decay)
            params[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
