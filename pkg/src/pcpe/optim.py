"""Adaptive moment estimation over a named parameter dict."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Per-parameter first/second moment updates with bias correction.

    Defaults: lr 1e-3, betas (0.9, 0.999), eps 1e-8, no warmup. Parameters
    without a gradient are skipped; gradients are cleared after the update.
    """

    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros(p.data.shape, dtype=np.float64)
                self._v[name] = np.zeros(p.data.shape, dtype=np.float64)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (p.grad * p.grad)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.grad = None
