"""Adaptive-moment first-order optimizer (Adam with bias correction)."""

from __future__ import annotations

import numpy as np

from .tape import Parameter

__all__ = ["Adam"]


class Adam:
    """Standard Adam.  Deterministic: identical inputs give identical updates."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {id(p): np.zeros_like(p.value) for p in self.params}
        self._v = {id(p): np.zeros_like(p.value) for p in self.params}

    def step(self, grads: dict[Parameter, np.ndarray] | None = None):
        """Apply one update.  ``grads`` defaults to each param's ``.grad``."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = grads.get(p) if grads is not None else p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
            if g.shape != p.value.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{p.name!r} shape {p.value.shape}"
                )
            m = self._m[id(p)]
            v = self._v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
