"""Adam over named parameter groups, with row pruning."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lrs: dict[str, float],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.lrs = dict(lrs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place update of every array in ``params``."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lrs[k] * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def keep_rows(self, keep: np.ndarray) -> None:
        for k in self.m:
            self.m[k] = self.m[k][keep]
            self.v[k] = self.v[k][keep]
