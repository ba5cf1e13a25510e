"""Central finite-difference checks against the tape's analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from lcmf.tensor import Tape, Tensor, no_tape

STEP = 1e-5
# below this norm a gradient is indistinguishable from finite-difference noise
# (e.g. attention key biases, whose exact gradient is zero)
NOISE_FLOOR = 1e-6
# tensors whose gradient is tiny next to the rest of the block are judged
# against this fraction of the block's largest gradient norm instead
BLOCK_FLOOR = 1e-4


def projector(shape, seed: int = 99) -> Tensor:
    """Fixed random weights turning an output into a scalar loss.

    A plain sum would hide errors behind LayerNorm's zero-sum outputs.
    """
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


def max_rel_error(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    samples: int | None = None,
    seed: int = 0,
    step: float = STEP,
) -> float:
    """Worst norm-wise relative error over ``tensors``.

    ``samples`` limits the number of probed entries per tensor (chosen at
    random) so large blocks stay cheap to check.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        tape.backward(loss_fn())
    rng = np.random.default_rng(seed)
    block_scale = max((np.linalg.norm(t.grad) for t in tensors if t.grad is not None), default=0.0)
    floor = max(NOISE_FLOOR, BLOCK_FLOOR * block_scale)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else np.array(t.grad)
        flat = list(np.ndindex(*t.shape)) if t.ndim else [()]
        if samples is not None and len(flat) > samples:
            flat = [flat[i] for i in rng.choice(len(flat), size=samples, replace=False)]
        a, n = [], []
        for idx in flat:
            old = t.data[idx]
            with no_tape():
                t.data[idx] = old + step
                fp = loss_fn().item()
                t.data[idx] = old - step
                fm = loss_fn().item()
            t.data[idx] = old
            a.append(analytic[idx])
            n.append((fp - fm) / (2 * step))
        a, n = np.array(a), np.array(n)
        scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst
