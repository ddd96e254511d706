"""Step rules for the generalized common-weakness loop.

``step(current, grad_like)`` returns the new (unclipped) point and always
*descends* along ``grad_like``.  Optimizers keep their own state between
calls; ``reset()`` clears it.
"""

from __future__ import annotations

import numpy as np

from .numeric import NORM_FLOOR, l2_normalize


class Optimizer:
    # True when step() applies its own l2 normalization to grad_like
    normalizes_input = False

    def step(self, current: np.ndarray, grad_like: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reset(self):
        pass

    def describe(self) -> dict:
        d = {k: v for k, v in vars(self).items() if not k.startswith("_")}
        return {"type": type(self).__name__, **d}


class PlainStep(Optimizer):
    def __init__(self, lr: float, signed: bool = False):
        self.lr = lr
        self.signed = signed

    def step(self, current, grad_like):
        d = np.sign(grad_like) if self.signed else grad_like
        return current - self.lr * d


class _Momentum(Optimizer):
    def __init__(self, mu: float, lr: float):
        self.mu = mu
        self.lr = lr
        self._m = None

    def reset(self):
        self._m = None

    def _accumulate(self, g):
        if self._m is None:
            self._m = np.zeros_like(g)
        self._m = self.mu * self._m + g
        return self._m


class SignMomentum(_Momentum):
    """MI-style: accumulate, then move by ``lr * sign(m)``."""

    def step(self, current, grad_like):
        return current - self.lr * np.sign(self._accumulate(grad_like))


class RawMomentum(_Momentum):
    def step(self, current, grad_like):
        return current - self.lr * self._accumulate(grad_like)


class NormalizedMomentum(_Momentum):
    """Accumulate ``g / ||g||_2`` and move by ``lr * m`` (the CSE inner rule)."""

    normalizes_input = True

    def __init__(self, mu: float, lr: float, floor: float = NORM_FLOOR):
        super().__init__(mu, lr)
        self.floor = floor

    def step(self, current, grad_like):
        return current - self.lr * self._accumulate(l2_normalize(grad_like, self.floor))


class Adam(Optimizer):
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps_adam: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps_adam = eps_adam
        self.reset()

    def reset(self):
        self._m = self._v = None
        self._t = 0

    def step(self, current, grad_like):
        if self._m is None:
            self._m = np.zeros_like(grad_like)
            self._v = np.zeros_like(grad_like)
        self._t += 1
        self._m = self.beta1 * self._m + (1 - self.beta1) * grad_like
        self._v = self.beta2 * self._v + (1 - self.beta2) * grad_like ** 2
        m_hat = self._m / (1 - self.beta1 ** self._t)
        v_hat = self._v / (1 - self.beta2 ** self._t)
        return current - self.lr * m_hat / (np.sqrt(v_hat) + self.eps_adam)
