from __future__ import annotations

import numpy as np

from .autodiff import Array


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay (decay added to the gradient)."""

    def __init__(self, params: list[Array], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf = [None] * len(params)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                buf = g if self._buf[i] is None else self.momentum * self._buf[i] + g
                self._buf[i] = buf
                g = buf
            p.data = (p.data - self.lr * g).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: list[Array], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in params]
        self._v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * np.square(p.grad)
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def step_lr(base: float, epoch: int, total: int, milestones=(0.625, 0.75, 0.875), gamma: float = 0.1) -> float:
    """Learning rate for ``epoch`` (0-based): divided by ``1/gamma`` at each milestone fraction."""
    passed = sum(epoch >= round(m * total) for m in milestones)
    return base * gamma ** passed
