"""Adam with bias correction."""
from __future__ import annotations

import numpy as np

from .engine import Tensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}; step aborted")
        self.name = name


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 4e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, frozen: tuple[str, ...] = ()):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.frozen = tuple(frozen)
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def trainable(self, name: str) -> bool:
        return not any(name.startswith(prefix) for prefix in self.frozen)

    def step(self) -> None:
        """One update from the accumulated ``.grad`` of every parameter.

        All gradients are screened first, so a non-finite one leaves every
        parameter and the moments untouched.
        """
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(name)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            if p.grad is None or not self.trainable(name):
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            m_hat = m / c1
            v_hat = v / c2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype, copy=False)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array(self.step_count, dtype=np.float32),
               "adam.lr": np.array(self.lr, dtype=np.float32)}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.step_count = int(tensors["adam.step"])
        for k, p in self.params.items():
            self.m[k] = np.array(tensors[f"adam.m.{k}"], dtype=p.data.dtype)
            self.v[k] = np.array(tensors[f"adam.v.{k}"], dtype=p.data.dtype)
