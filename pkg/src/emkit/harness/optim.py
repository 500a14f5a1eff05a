"""AdamW over a dict of immutable parameter tensors, plus a cosine schedule."""
from __future__ import annotations

import math

import numpy as np

from emkit.errors import ConfigError
from emkit.tensor.core import Tensor


def cosine_lr(step: int, total: int, lr0: float, lr_min: float = 1e-7) -> float:
    """Cosine decay from ``lr0`` at step 0 to ``lr_min`` at ``total``."""
    if total <= 0:
        return lr0
    frac = min(max(step / total, 0.0), 1.0)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    def __init__(self, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr < 0 or not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ConfigError(f"bad AdamW settings lr={lr} betas={betas}")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr: float | None = None) -> dict:
        """Return a new parameter dict; names missing from ``grads`` are kept."""
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = dict(params)
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            data = p.data * (1.0 - lr * self.wd) - lr * upd if self.wd else p.data - lr * upd
            out[name] = Tensor(data, dtype=p.dtype, requires_grad=True, name=name)
        return out
