"""AdamW and learning-rate schedules."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import ConfigurationError, Parameter


class AdamW:
    """Adam with decoupled weight decay, applied to matrices only (ndim >= 2)."""

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(step: int, total: int, base: float, schedule: str, pct_start: float = 0.1) -> float:
    """Learning rate for 0-based ``step`` out of ``total`` optimizer steps.

    ``onecycle``: cosine warm-up from ``base/25`` to ``base`` over
    ``pct_start`` of training, then cosine decay to ``base/1e4``.
    ``cosine``: cosine annealing from ``base`` to 0.
    """
    if total <= 0 or schedule == "constant":
        return base
    frac = min(step, total - 1) / max(total - 1, 1)
    if schedule == "cosine":
        return 0.5 * base * (1.0 + math.cos(math.pi * frac))
    if schedule == "onecycle":
        start, end = base / 25.0, base / 1e4
        if frac < pct_start:
            k = frac / pct_start
            return start + (base - start) * 0.5 * (1.0 - math.cos(math.pi * k))
        k = (frac - pct_start) / max(1.0 - pct_start, 1e-12)
        return end + (base - end) * 0.5 * (1.0 + math.cos(math.pi * k))
    raise ConfigurationError(f"unknown schedule {schedule!r}")
