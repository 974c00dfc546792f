"""Momentum SGD and Adam, updating parameter arrays in place."""
from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .autodiff import Tensor


class MissingGradError(RuntimeError):
    pass


class Optimizer:
    kind = "base"

    def __init__(self, params: Sequence[Tensor], lr: float):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params: List[Tensor] = list(params)
        self.lr = lr
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise MissingGradError(f"parameter {p.name or i!r} has no gradient")
        return [p.grad for p in self.params]

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """SGD with heavy-ball momentum: ``buf = momentum*buf + g; w -= lr*buf``."""

    kind = "sgd"

    def __init__(self, params, lr: float = 1e-3, momentum: float = 0.9):
        super().__init__(params, lr)
        self.momentum = momentum
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = self._grads()
        for p, buf, g in zip(self.params, self.buffers, grads):
            buf *= self.momentum
            buf += g
            p.data -= (self.lr * buf).astype(p.dtype, copy=False)
        self.step_count += 1


class Adam(Optimizer):
    kind = "adam"

    def __init__(
        self,
        params,
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = self._grads()
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)

