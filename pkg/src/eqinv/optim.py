"""SGD with heavy-ball momentum and a step learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class SGD:
    """v <- mu * v + g ; p <- p - lr * v  (plus optional L2 weight decay folded into g)."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v


def step_lr(base_lr: float, epoch: int, decay_epochs, factor: float = 0.1) -> float:
    """Learning rate at 0-based ``epoch``: multiplied by ``factor`` at each decay epoch reached."""
    n = sum(1 for d in decay_epochs if epoch >= d)
    return base_lr * factor**n
