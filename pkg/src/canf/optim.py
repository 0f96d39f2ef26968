"""Adam optimizer with fixed defaults (ablation arms never vary these)."""
from __future__ import annotations

import numpy as np

ADAM_DEFAULTS = {"lr": 2e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}


class Adam:
    def __init__(self, params, lr=ADAM_DEFAULTS["lr"], beta1=ADAM_DEFAULTS["beta1"],
                 beta2=ADAM_DEFAULTS["beta2"], eps=ADAM_DEFAULTS["eps"]):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

        self._scratch = [np.empty_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v, s in zip(self.params, self._m, self._v, self._scratch):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            np.multiply(g, 1 - b1, out=s)
            m += s
            v *= b2
            np.multiply(g, g, out=s)
            s *= 1 - b2
            v += s
            np.divide(v, bc2, out=s)
            np.sqrt(s, out=s)
            s += self.eps
            np.divide(m, s, out=s)
            s *= self.lr / bc1
            p.data -= s

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
