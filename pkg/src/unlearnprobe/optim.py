"""AdamW with a multi-step learning-rate schedule, operating on numpy arrays in place."""

from __future__ import annotations

import numpy as np


class AdamW:
    """Decoupled-weight-decay Adam (Loshchilov & Hutter), torch-compatible update order."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = float(lr)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        root_c2 = np.sqrt(c2)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            tmp = np.multiply(g, g)
            tmp *= 1.0 - b2
            v *= b2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp /= root_c2
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / c1
            p -= tmp


def decay_milestones(max_iters: int, fractions=(3 / 8, 5 / 8, 7 / 8)) -> list[int]:
    return [int(max_iters * f) for f in fractions]


class MultiStepSchedule:
    """Multiply the optimizer's lr by ``factor`` once each milestone is passed."""

    def __init__(self, optimizer: AdamW, milestones, factor: float = 0.5):
        if not 0 < factor < 1:
            raise ValueError("decay factor must lie in (0, 1)")
        self.optimizer = optimizer
        self.milestones = sorted(milestones)
        self.factor = factor
        self.base_lr = optimizer.lr
        self.count = 0

    def step(self) -> None:
        self.count += 1
        n_passed = sum(1 for m in self.milestones if self.count >= m)
        self.optimizer.lr = self.base_lr * self.factor**n_passed
