from __future__ import annotations

import numpy as np


class AdamW:
    """Adam with decoupled weight decay over a flat list of arrays (updated in place)."""

    def __init__(self, params, lr=1.5e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4, decay_mask=None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_mask = list(decay_mask) if decay_mask is not None else [True] * len(self.params)
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v, decay in zip(self.params, grads, self.m, self.v, self.decay_mask):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if decay and self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(base: float, step: int, total: int, floor: float = 0.05) -> float:
    if total <= 1:
        return base
    frac = step / (total - 1)
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))
