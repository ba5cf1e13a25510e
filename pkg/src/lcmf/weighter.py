"""Adaptive multi-loss weighting driven by EMA-relative loss trends.

Update rule, per optimizer step with task losses ``l_k``:

1. ``r_k = l_k / max(ema_k, eps)`` using the EMA *before* this step.
2. Target weights ``t_k`` proportional to ``r_k``, scaled to sum to ``K`` and
   floor-clipped (clipped mass is taken proportionally from the others).
3. ``w <- w + s (t - w)`` with ``s = min(1, step_cap / max|t - w|)``, which
   keeps the sum at ``K``, every weight above the floor, and each change
   within ``step_cap``.
4. ``ema_k <- decay ema_k + (1 - decay) l_k``; the first step only seeds it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .tensor import ConfigurationError, Tensor


@dataclass(frozen=True)
class LossWeights:
    weights: np.ndarray
    ema: np.ndarray | None = None
    decay: float = 0.95
    step_cap: float = 0.05
    floor: float = 0.05
    eps: float = 1e-12
    skipped: int = field(default=0, compare=False)

    @classmethod
    def init(cls, tasks: int, **kw) -> "LossWeights":
        if tasks < 2:
            raise ConfigurationError("loss weighting needs at least two tasks")
        floor = kw.get("floor", cls.floor)
        if floor * tasks > tasks or floor < 0:
            raise ConfigurationError(f"floor {floor} incompatible with {tasks} tasks")
        return cls(np.ones(tasks), **kw)

    @property
    def tasks(self) -> int:
        return len(self.weights)


def ema_update(ema: float | None, loss: float, decay: float = 0.95) -> float:
    if ema is None:
        return loss
    return decay * ema + (1.0 - decay) * loss


def floored_target(r: np.ndarray, floor: float) -> np.ndarray:
    """Scale ``r`` to sum to ``len(r)`` subject to ``t >= floor`` (water-filling)."""
    K = len(r)
    r = np.maximum(np.asarray(r, dtype=np.float64), 0.0)
    if r.sum() <= 0:
        return np.ones(K)
    pinned = np.zeros(K, dtype=bool)
    while True:
        free = ~pinned
        budget = K - floor * pinned.sum()
        mass = r[free].sum()
        t = np.where(pinned, floor, r * (budget / mass) if mass > 0 else budget / free.sum())
        low = free & (t < floor)
        if not low.any():
            return t
        pinned |= low


def reweight(losses: Sequence[float], state: LossWeights) -> LossWeights:
    losses = np.asarray(losses, dtype=np.float64)
    if len(losses) != state.tasks:
        raise ConfigurationError(f"{len(losses)} losses for {state.tasks} tasks")
    if not np.all(np.isfinite(losses)):
        return replace(state, skipped=state.skipped + 1)
    if state.ema is None:
        return replace(state, ema=losses.copy())
    r = losses / np.maximum(state.ema, state.eps)
    target = floored_target(r, state.floor)
    step = target - state.weights
    biggest = np.abs(step).max()
    scale = 1.0 if biggest <= state.step_cap else state.step_cap / biggest
    weights = state.weights + scale * step
    ema = state.decay * state.ema + (1.0 - state.decay) * losses
    return replace(state, weights=weights, ema=ema)


def total_loss(losses: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    if len(losses) != len(weights):
        raise ConfigurationError("loss and weight lists differ in length")
    out = losses[0] * float(weights[0])
    for l, w in zip(losses[1:], weights[1:]):
        out = out + l * float(w)
    return out
