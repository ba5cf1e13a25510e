"""Selective state-space scan.

Shapes follow the per-position, per-channel convention::

    x, A, delta : T x D        B, C : T x N        D_skip : D
    h[t, d, n] = A_bar[t, d] * h[t-1, d, n] + B_bar[t, d, n] * x[t, d]
    y[t, d]    = sum_n C[t, n] * h[t, d, n] + D_skip[d] * x[t, d]

with zero-order-hold discretisation ``A_bar = exp(A_eff * delta)`` and
``B_bar = (exp(A_eff * delta) - 1) / A_eff * B``.  In stable mode
``A_eff = -A``; otherwise ``A`` is used as given.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .tensor import _ACTIVE_TAPE, ConfigurationError, ContractError, DimensionError, Tensor, _result

LIMIT_THRESHOLD = 1e-8
DEFAULT_BLOCK_LENGTH = 64


def expm1_ratio(z: np.ndarray) -> np.ndarray:
    """``(exp(z) - 1) / z`` with the limit value 1 near zero."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < LIMIT_THRESHOLD
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)


def expm1_ratio_derivative(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < 1e-2
    safe = np.where(small, 1.0, z)
    direct = (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe)
    series = 0.5 + z * (1 / 3 + z * (1 / 8 + z * (1 / 30 + z * (1 / 144 + z / 840))))
    return np.where(small, series, direct)


@dataclass(frozen=True)
class SSMParams:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: np.ndarray
    D_skip: np.ndarray

    def __post_init__(self) -> None:
        T, D = np.shape(self.A)
        if np.shape(self.delta) != (T, D):
            raise DimensionError(f"delta shape {np.shape(self.delta)} != A shape {(T, D)}")
        if np.shape(self.B)[0] != T or np.shape(self.C) != np.shape(self.B):
            raise DimensionError(f"B {np.shape(self.B)} / C {np.shape(self.C)} must both be T x N with T={T}")
        if np.shape(self.D_skip) != (D,):
            raise DimensionError(f"D_skip shape {np.shape(self.D_skip)} != ({D},)")

    @property
    def T(self) -> int:
        return self.A.shape[0]

    @property
    def D(self) -> int:
        return self.A.shape[1]

    @property
    def N(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class DiscretizedSSM:
    A_bar: np.ndarray  # T x D
    B_bar: np.ndarray  # T x D x N


@dataclass(frozen=True)
class ScanBlockPlan:
    """Split of a length-T scan into blocks of ``block_length`` positions.

    The final state of block ``b`` seeds block ``b + 1``; the last block may
    be short.
    """

    block_length: int = DEFAULT_BLOCK_LENGTH

    def __post_init__(self) -> None:
        if int(self.block_length) < 1:
            raise ConfigurationError(f"block_length must be >= 1, got {self.block_length}")

    def block_count(self, T: int) -> int:
        return max(1, -(-T // self.block_length))

    @classmethod
    def auto(cls, T: int) -> "ScanBlockPlan":
        """Roughly sqrt(T) blocks of sqrt(T) positions, the cheapest host plan."""
        return cls(max(1, math.isqrt(max(T - 1, 0)) + 1))


def effective_A(A: np.ndarray, stable_mode: bool) -> np.ndarray:
    return -A if stable_mode else A


def discretize(p: SSMParams, stable_mode: bool = True) -> DiscretizedSSM:
    delta = np.asarray(p.delta, dtype=np.float64)
    if not np.all(delta > 0):
        raise ContractError("discretize: delta must be strictly positive")
    a = effective_A(np.asarray(p.A, dtype=np.float64), stable_mode)
    z = a * delta
    small = np.abs(z) < LIMIT_THRESHOLD
    safe_a = np.where(small, 1.0, a)
    gain = np.where(small, delta, np.expm1(np.where(small, 0.0, z)) / safe_a)
    return DiscretizedSSM(np.exp(z), gain[:, :, None] * np.asarray(p.B)[:, None, :])


def _check_scan_shapes(x, d: DiscretizedSSM, C, D_skip) -> None:
    T, D = x.shape
    if d.A_bar.shape != (T, D) or d.B_bar.shape[:2] != (T, D):
        raise DimensionError(f"scan: x {x.shape} vs A_bar {d.A_bar.shape}, B_bar {d.B_bar.shape}")
    N = d.B_bar.shape[2]
    if C.shape != (T, N) or D_skip.shape != (D,):
        raise DimensionError(f"scan: C {C.shape} must be {(T, N)} and D_skip {D_skip.shape} must be {(D,)}")


def _readout(h: np.ndarray, C: np.ndarray, x: np.ndarray, D_skip: np.ndarray) -> np.ndarray:
    return (h @ C[:, :, None])[..., 0] + D_skip * x


def scan_sequential(x, d: DiscretizedSSM, C, D_skip) -> np.ndarray:
    """Reference recurrence, one position at a time from ``h_0 = 0``."""
    x, C, D_skip = (np.asarray(v, dtype=np.float64) for v in (x, C, D_skip))
    _check_scan_shapes(x, d, C, D_skip)
    T, D = x.shape
    h = np.zeros((D, d.B_bar.shape[2]))
    states = np.empty_like(d.B_bar)
    for t in range(T):
        h = d.A_bar[t][:, None] * h + d.B_bar[t] * x[t][:, None]
        states[t] = h
    return _readout(states, C, x, D_skip)


def linear_recurrence(
    a: np.ndarray,
    u: np.ndarray,
    block_length: int | None = None,
    h0: np.ndarray | None = None,
    workers: int | None = None,
) -> np.ndarray:
    """All states of ``h[t] = a[t] * h[t-1] + u[t]`` along axis 0.

    Runs blockwise: every block is scanned from a zero state (all blocks at
    once), block carries are then chained sequentially, and finally each
    block is corrected by its carry times the running product of ``a``.  The
    first and last phases touch blocks independently and are split across
    ``workers`` threads when requested.
    """
    T = u.shape[0]
    if T == 0:
        return np.zeros_like(u)
    L = T if block_length is None else min(int(block_length), T)
    if L < 1:
        raise ConfigurationError("block_length must be >= 1")
    nb = -(-T // L)
    pad = nb * L - T
    if pad:
        a = np.concatenate([a, np.ones((pad,) + a.shape[1:])])
        u = np.concatenate([u, np.zeros((pad,) + u.shape[1:])])
    ab = a.reshape((nb, L) + a.shape[1:])
    ub = u.reshape((nb, L) + u.shape[1:])
    need_fill = nb > 1 or h0 is not None

    loc = np.empty_like(ub)
    cum = np.empty(ab.shape) if need_fill else None

    def local(lo: int, hi: int) -> None:
        loc[lo:hi, 0] = ub[lo:hi, 0]
        for j in range(1, L):
            np.multiply(ab[lo:hi, j], loc[lo:hi, j - 1], out=loc[lo:hi, j])
            loc[lo:hi, j] += ub[lo:hi, j]
        if need_fill:
            np.cumprod(ab[lo:hi], axis=1, out=cum[lo:hi])

    ranges = _split(nb, workers)
    _run(local, ranges, workers)
    if not need_fill:
        return loc.reshape((nb * L,) + u.shape[1:])[:T]

    carry = np.empty((nb,) + ub.shape[2:])
    c = np.zeros(ub.shape[2:]) if h0 is None else np.asarray(h0, dtype=np.float64)
    for b in range(nb):
        carry[b] = c
        c = cum[b, -1] * c + loc[b, -1]

    out = np.empty_like(loc)

    def fill(lo: int, hi: int) -> None:
        out[lo:hi] = loc[lo:hi] + cum[lo:hi] * carry[lo:hi, None]

    _run(fill, ranges, workers)
    return out.reshape((nb * L,) + u.shape[1:])[:T]


def _split(n: int, workers: int | None) -> list[tuple[int, int]]:
    k = max(1, min(workers or 1, n))
    edges = np.linspace(0, n, k + 1).astype(int)
    return [(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]


def _run(fn, ranges, workers: int | None) -> None:
    if not workers or workers <= 1 or len(ranges) == 1:
        for lo, hi in ranges:
            fn(lo, hi)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for f in [pool.submit(fn, lo, hi) for lo, hi in ranges]:
            f.result()


def scan_blocked(x, d: DiscretizedSSM, C, D_skip, plan: ScanBlockPlan, workers: int | None = None) -> np.ndarray:
    """Blocked execution of :func:`scan_sequential`; same output for any plan."""
    if not isinstance(plan, ScanBlockPlan):
        raise ConfigurationError(f"expected a ScanBlockPlan, got {plan!r}")
    x, C, D_skip = (np.asarray(v, dtype=np.float64) for v in (x, C, D_skip))
    _check_scan_shapes(x, d, C, D_skip)
    u = d.B_bar * x[:, :, None]
    states = linear_recurrence(d.A_bar[:, :, None], u, plan.block_length, workers=workers)
    return _readout(states, C, x, D_skip)


def flops_scan(T: int, D: int, N: int) -> int:
    """Floating-point operations of the recurrence and readout.

    Per position and channel: ``N`` state updates of 2 multiplies + 1 add,
    an ``N``-term dot product with ``C`` (N multiplies, N adds counting the
    add onto the skip term) and one skip multiply.
    """
    return T * D * (5 * N + 1)


# --- differentiable fused op ------------------------------------------------

_STREAM_CHUNK = 512


def selective_scan(
    x: Tensor,
    A: Tensor,
    delta: Tensor,
    B: Tensor,
    C: Tensor,
    D_skip: Tensor,
    *,
    stable_mode: bool = True,
    block_length: int | None = None,
) -> Tensor:
    """Discretise and scan in one differentiable operation.

    ``block_length=None`` scans the whole sequence as one block.  Without an
    active tape long sequences are processed in chunks so the ``T x D x N``
    state history is never materialised.
    """
    xv, av, dv, Bv, Cv, Dv = (t.data for t in (x, A, delta, B, C, D_skip))
    T, D = xv.shape
    if av.shape != (T, D) or dv.shape != (T, D) or Bv.shape[0] != T or Cv.shape != Bv.shape or Dv.shape != (D,):
        raise DimensionError(
            f"selective_scan: x {xv.shape}, A {av.shape}, delta {dv.shape}, B {Bv.shape}, C {Cv.shape}, D {Dv.shape}"
        )
    if not np.all(dv > 0):
        raise ContractError("selective_scan: delta must be strictly positive")
    sign = -1.0 if stable_mode else 1.0
    a_eff = sign * av
    z = a_eff * dv
    A_bar = np.exp(z)
    gain = dv * expm1_ratio(z)
    gx = gain * xv
    L = block_length or max(T, 1)  # one block: fastest on a single host core

    parents = (x, A, delta, B, C, D_skip)
    if _ACTIVE_TAPE.get() is None or not any(p.requires_grad for p in parents):
        return Tensor(_streamed_scan(A_bar, gx, Bv, Cv, xv, Dv, L))

    u = gx[:, :, None] * Bv[:, None, :]
    h = linear_recurrence(A_bar[:, :, None], u, L)
    y = _readout(h, Cv, xv, Dv)

    def grad(gy):
        c = gy[:, :, None] * Cv[:, None, :]
        a_next = np.concatenate([A_bar[1:], np.ones((1, D))])[::-1]
        lam = linear_recurrence(a_next[:, :, None], c[::-1], L)[::-1]
        h_prev = np.concatenate([np.zeros((1,) + h.shape[1:]), h[:-1]])
        g_abar = (lam * h_prev).sum(axis=-1)
        lam_B = (lam @ Bv[:, :, None])[..., 0]  # sum_n lam * B
        g_gain = lam_B * xv
        g_x = lam_B * gain + Dv * gy
        g_B = (gx[:, None, :] @ lam)[:, 0, :]  # sum_d gx * lam
        g_C = (gy[:, None, :] @ h)[:, 0, :]
        g_D = (gy * xv).sum(axis=0)
        g_z = g_abar * A_bar + g_gain * dv * expm1_ratio_derivative(z)
        g_a = g_z * dv
        g_delta = g_z * a_eff + g_gain * expm1_ratio(z)
        return g_x, sign * g_a, g_delta, g_B, g_C, g_D

    return _result(y, parents, grad)


def _streamed_scan(A_bar, gx, B, C, x, D_skip, L) -> np.ndarray:
    T, D = x.shape
    y = np.empty((T, D))
    h = np.zeros((D, B.shape[1]))
    for lo in range(0, T, _STREAM_CHUNK):
        hi = min(T, lo + _STREAM_CHUNK)
        u = gx[lo:hi, :, None] * B[lo:hi, None, :]
        states = linear_recurrence(A_bar[lo:hi, :, None], u, min(L, hi - lo), h0=h if lo else None)
        y[lo:hi] = _readout(states, C[lo:hi], x[lo:hi], D_skip)
        h = states[-1]
    return y
