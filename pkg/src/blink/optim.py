"""Shared training utilities: AdamW over parameter dicts, SGD fallback, and
the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np


def cosine_warmup_lr(step: int, total_steps: int, lr_max: float, warmup_ratio: float) -> float:
    """Linear warmup to lr_max, then cosine decay to 0 at the final step."""
    if total_steps <= 0:
        return lr_max
    warmup_steps = int(round(warmup_ratio * total_steps))
    if step < warmup_steps:
        return lr_max * (step + 1) / warmup_steps
    if total_steps == warmup_steps:
        return lr_max
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled-weight-decay adaptive optimizer over a dict of arrays."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name in sorted(self.params):
            g = np.asarray(grads[name], dtype=np.float64)
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p = self.params[name]
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.astype(np.float64)
            p -= (lr * update).astype(p.dtype)


class MomentumSGD:
    """Plain momentum SGD fallback with the same interface as AdamW."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-2, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.buf = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name in sorted(self.params):
            g = np.asarray(grads[name], dtype=np.float64)
            self.buf[name] = self.momentum * self.buf[name] + g
            p = self.params[name]
            p -= (lr * self.buf[name]).astype(p.dtype)
