"""
SGD with momentum and the cosine learning-rate schedule
"""

import math

import numpy as np

from cilkit.errors import NumericalError


def cosine_lr(step, total_steps, lr0):
    """lr(s) = lr0 * 0.5 * (1 + cos(pi * s / S))"""
    if total_steps <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class SGDMomentum:
    """v <- mu * v + g ; w <- w - lr * v"""

    def __init__(self, params, momentum=0.9):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr):
        """Apply one update; ``lr`` comes from the schedule for this step"""
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise NumericalError(f"parameter {i} {p.shape} has no gradient")
            self.velocity[i] = self.momentum * self.velocity[i] + p.grad
            updated = p.data - lr * self.velocity[i]
            if not np.all(np.isfinite(updated)):
                raise NumericalError(f"non-finite update for parameter {i} {p.shape}")
            p.data[...] = updated


def sgd_momentum_step(params, lr, momentum, optimizer=None):
    """
    Functional form: one momentum step over ``params``

    Pass the returned optimizer back in to keep velocity between calls.
    """
    optimizer = optimizer or SGDMomentum(params, momentum=momentum)
    optimizer.step(lr)
    return optimizer
