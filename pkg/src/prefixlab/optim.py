"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict[str, Tensor], lr: float = 5e-5,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self) -> None:
        """Apply one update from the accumulated gradients and clear them."""
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            g *= g
            v *= self.beta2
            v += (1.0 - self.beta2) * g
            # reuse g as the update scratch buffer
            np.sqrt(v, out=g)
            g *= 1.0 / np.sqrt(b2c)
            g += self.eps
            np.divide(m, g, out=g)
            g *= self.lr / b1c
            p.data -= g
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
