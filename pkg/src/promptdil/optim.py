"""AdamW with a cosine learning-rate schedule, operating on autodiff tensors."""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(base_lr, step, total_steps):
    if total_steps <= 0:
        return base_lr
    frac = min(step / total_steps, 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Decoupled-weight-decay Adam.

    ``row_masks`` maps a parameter to a boolean row mask; rows outside the mask
    are never touched (neither by the gradient step nor by weight decay).
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01,
                 no_decay=(), row_masks=None, total_steps=0):
        self.params = list(params)
        self.base_lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = {id(p) for p in no_decay}
        self.row_masks = {id(p): m for p, m in (row_masks or {}).items()}
        self.total_steps = total_steps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self):
        return cosine_lr(self.base_lr, self.t, self.total_steps)

    def step(self, grads):
        lr = self.lr
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            update = lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            if self.weight_decay and id(p) not in self.no_decay:
                update = update + lr * self.weight_decay * p.data
            mask = self.row_masks.get(id(p))
            if mask is not None:
                update = update * mask.reshape((-1,) + (1,) * (p.data.ndim - 1))
            p.data = p.data - update
