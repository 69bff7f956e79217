"""SGD with classical momentum and L2 weight decay."""
from __future__ import annotations

from typing import Container, Mapping

import numpy as np

from ctan.tensor import Tensor


class MissingGradientError(RuntimeError):
    pass


class SGD:
    """Momentum SGD over a named parameter set.

    Per step, for every parameter ``p`` with gradient ``g``::

        v <- momentum * v + (g + weight_decay * p)
        p <- p - lr * v

    Velocity buffers start at zero; gradients are cleared after the update.
    ``lr_scales`` optionally multiplies the learning rate of named parameters.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0, lr_scales: Mapping[str, float] | None = None):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr_scales = dict(lr_scales or {})
        if any(v <= 0 for v in self.lr_scales.values()):
            raise ValueError("learning-rate scales must be positive")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, frozen: Container[str] = (), max_grad_norm: float | None = None) -> float:
        """Update every parameter not named in ``frozen``; clear all gradients.

        With ``max_grad_norm``, gradients are rescaled so their global L2 norm
        does not exceed it.  Returns the pre-clipping norm.
        """
        missing = [name for name, p in self.params.items() if p.grad is None and name not in frozen]
        if missing:
            raise MissingGradientError(f"no gradient for parameter(s): {', '.join(missing)}")
        norm = float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                                 for name, p in self.params.items() if name not in frozen)))
        factor = 1.0 if max_grad_norm is None or norm <= max_grad_norm else max_grad_norm / norm
        for name, p in self.params.items():
            if name not in frozen:
                g = p.grad if factor == 1.0 else (p.grad * factor).astype(p.dtype)
                d_p = g + self.weight_decay * p.data if self.weight_decay else g
                v = self.velocity.get(name)
                v = d_p.copy() if v is None else self.momentum * v + d_p
                self.velocity[name] = v
                p.data = (p.data - self.lr * self.lr_scales.get(name, 1.0) * v).astype(p.dtype)
            p.grad = None
        return norm


def sgd_step(params: Mapping[str, Tensor], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, velocity: dict | None = None) -> dict:
    """One functional update; returns the (mutated) velocity dict."""
    opt = SGD(params, lr, momentum, weight_decay)
    if velocity is not None:
        opt.velocity = velocity
    opt.step()
    return opt.velocity
