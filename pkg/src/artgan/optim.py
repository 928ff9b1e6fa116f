"""RMSProp and the step learning-rate schedule."""
from __future__ import annotations

import numpy as np

from .nn import ParamStore


class RMSProp:
    """Plain RMSProp without momentum.

    r <- rho * r + (1 - rho) * g**2
    theta <- theta - lr * g / (sqrt(r) + eps)
    """

    def __init__(self, store: ParamStore, lr=1e-3, rho=0.9, eps=1e-8):
        self.store, self.lr, self.rho, self.eps = store, lr, rho, eps
        self.r = {name: np.zeros_like(p) for name, p, _ in store.items()}
        self.steps = 0

    def step(self):
        grads = [(name, p, g) for name, p, g in self.store.items()]
        for name, _, g in grads:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}; step aborted")
        for name, p, g in grads:
            r = self.r[name]
            r *= self.rho
            r += (1.0 - self.rho) * g * g
            p -= self.lr * g / (np.sqrt(r) + self.eps)
        self.steps += 1

    def state_arrays(self):
        return self.r

    def snapshot(self):
        return {n: r.copy() for n, r in self.r.items()}, self.steps

    def restore(self, snap):
        arrays, steps = snap
        for n, r in arrays.items():
            np.copyto(self.r[n], r)
        self.steps = steps


def lr_at_epoch(epoch, base_lr=1e-3, drop_epoch=80, factor=10.0):
    """``base_lr`` until ``drop_epoch``, ``base_lr / factor`` from then on."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr if epoch < drop_epoch else base_lr / factor
