"""Parameter update rules: SGD with momentum, and Adam."""

from __future__ import annotations

import numpy as np

from .core import ParamSet


class SgdMomentum:
    def __init__(self, params: ParamSet, momentum: float = 0.0):
        self.params = params
        self.momentum = momentum
        self._velocity = {n: np.zeros_like(t.value) for n, t in params.items()}

    def step(self, lr: float) -> None:
        self.params.require_grads()
        for name, t in self.params.items():
            v = self._velocity[name]
            v *= self.momentum
            v += t.grad
            t.value -= lr * v


class Adam:
    def __init__(self, params: ParamSet, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._t = 0
        self._m = {n: np.zeros_like(t.value) for n, t in params.items()}
        self._v = {n: np.zeros_like(t.value) for n, t in params.items()}

    def step(self, lr: float) -> None:
        self.params.require_grads()
        self._t += 1
        c1 = 1.0 - self.beta1 ** self._t
        c2 = 1.0 - self.beta2 ** self._t
        for name, t in self.params.items():
            g = t.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            t.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
