"""Adam optimizer over bounded Params."""

from __future__ import annotations

from typing import Dict, Iterable, List, Optional

import numpy as np

from .errors import GradientError
from .tape import Param


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8) with bound clamping."""

    def __init__(self, params: Iterable[Param], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params: List[Param] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Optional[Dict[Param, np.ndarray]] = None) -> None:
        """Apply one update from ``grads`` (or each param's ``.grad``)."""
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p) if grads is not None else p.grad
            if g is None:
                continue
            g = np.asarray(g, dtype=float)
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for param {p.name!r}")
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / b1t
            v_hat = self._v[i] / b2t
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.clamp()


def adam_step(params: Iterable[Param], grads: Dict[Param, np.ndarray],
              state: Optional[Adam], lr: float = 1e-4) -> Adam:
    """One-shot functional form: builds or reuses ``state`` and steps it."""
    if state is None:
        state = Adam(params, lr=lr)
    state.lr = lr
    state.step(grads)
    return state
