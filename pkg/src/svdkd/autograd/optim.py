from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np

from .tensor import DTYPE, Tensor


class SGD:
    """SGD with (Nesterov) momentum and L2 weight decay.

    Velocity buffers live on the optimizer and persist across ``step`` calls:

        d = g + weight_decay * w
        v = momentum * v + d
        w -= lr * (d + momentum * v)   if nesterov
        w -= lr * v                     otherwise
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-2, momentum: float = 0.9,
                 nesterov: bool = True, weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Optional[Sequence[np.ndarray]] = None) -> None:
        """Update parameters from ``grads`` (one per param) or from each ``p.grad``."""
        if grads is None:
            missing = [p.name or f"#{i}" for i, p in enumerate(self.params) if p.grad is None]
            if missing:
                raise ValueError(f"sgd_step: parameters without grad: {missing}")
            grads = [p.grad for p in self.params]
        elif len(grads) != len(self.params):
            raise ValueError(f"sgd_step: got {len(grads)} grads for {len(self.params)} params")
        lr, mu, wd = DTYPE(self.lr), DTYPE(self.momentum), DTYPE(self.weight_decay)
        for p, g, v in zip(self.params, grads, self.velocity):
            d = g + wd * p.data if self.weight_decay else g
            v *= mu
            v += d
            upd = d + mu * v if self.nesterov else v
            p.data = (p.data - lr * upd).astype(DTYPE)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict:
        return {f"velocity/{i}": v for i, v in enumerate(self.velocity)}


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0, nesterov: bool = False,
             weight_decay: float = 0.0, optimizer: Optional[SGD] = None) -> SGD:
    """Functional form: one step over ``params`` using their ``.grad``.

    Pass the returned optimizer back in to keep velocity across calls.
    """
    if optimizer is None:
        optimizer = SGD(params, lr=lr, momentum=momentum, nesterov=nesterov, weight_decay=weight_decay)
    optimizer.step()
    return optimizer
