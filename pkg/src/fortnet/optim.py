"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class OptimizerError(RuntimeError):
    """Raised when a parameter gradient is unusable (e.g. non-finite)."""


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, param: Tensor):
        self.m = np.zeros_like(param.data)
        self.v = np.zeros_like(param.data)


class Adam:
    """Bias-corrected Adam. Defaults beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        # params: iterable of (name, Tensor)
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.state = {name: AdamState(p) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise OptimizerError(
                    f"non-finite gradient for parameter {name!r} at step {t}"
                )
            s = self.state[name]
            s.m = self.beta1 * s.m + (1 - self.beta1) * g
            s.v = self.beta2 * s.v + (1 - self.beta2) * g * g
            m_hat = s.m / (1 - self.beta1 ** t)
            v_hat = s.v / (1 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
