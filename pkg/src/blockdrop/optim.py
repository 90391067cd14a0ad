from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import AutogradError, Parameter


class Adam:
    """Adam with bias correction. ``step`` consumes and clears the gradients.

    Parameters whose gradient is absent (e.g. a dropped block) are skipped,
    so their moment estimates are left untouched for that step.
    """

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        if not self.params:
            raise ValueError("Adam needs at least one parameter")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        if all(p.grad is None for p in self.params):
            raise AutogradError("Adam.step called with no gradients; run backward first")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

