"""Plain SGD and Adam parameter updates."""

from __future__ import annotations

import numpy as np

from .errors import NumericError
from .tensor import Parameter


class SGD:
    """Vanilla gradient descent: p <- p - lr * grad."""

    def __init__(self, params, lr: float):
        self.params: list[Parameter] = list(params)
        self.lr = float(lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            p.data = p.data - self.lr * p.grad
            if not np.isfinite(p.data.sum()):
                raise NumericError(f"SGD update diverged on {getattr(p, 'name', '?')}")


class Adam:
    """Adam with bias correction.

    The GAN-style default betas (0.0, 0.9) drop first-moment smoothing,
    which keeps adversarial updates responsive.
    """

    def __init__(self, params, lr: float = 1e-4, betas: tuple = (0.0, 0.9), eps: float = 1e-8):
        self.params: list[Parameter] = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr / (1.0 - b1**self.t)
        inv_sqrt_bias2 = 1.0 / np.sqrt(1.0 - b2**self.t)
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            m = self._m[i]
            v = self._v[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v)
            denom *= inv_sqrt_bias2
            denom += self.eps
            np.divide(m, denom, out=denom)
            denom *= scale
            p.data -= denom
            if not np.isfinite(p.data.sum()):
                raise NumericError(f"Adam update diverged on {getattr(p, 'name', '?')}")
