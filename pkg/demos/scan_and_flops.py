"""Selective scan against a quadratic oracle, then FLOPs scaling of CMM vs attention."""

import numpy as np

from lcmf.cmm import MambaConfig, flops_cmm
from lcmf.sam import flops_attention
from lcmf.scan import SSMParams, ScanBlockPlan, discretize, scan_blocked, scan_sequential


def unrolled(x, A_bar, B_bar, C, D_skip):
    T = len(x)
    y = D_skip * x
    for t in range(T):
        decay = np.ones_like(x[0])
        for s in range(t, -1, -1):
            y[t] += (decay[:, None] * B_bar[s] * x[s][:, None]) @ C[t]
            decay = decay * A_bar[s]
    return y


def main():
    rng = np.random.default_rng(0)
    T, D, N = 48, 4, 3
    x = rng.standard_normal((T, D))
    p = SSMParams(rng.uniform(0.1, 1, (T, D)), rng.standard_normal((T, N)), rng.standard_normal((T, N)),
                  rng.uniform(0.1, 1, (T, D)), rng.standard_normal(D))
    d = discretize(p)
    seq = scan_sequential(x, d, p.C, p.D_skip)
    blk = scan_blocked(x, d, p.C, p.D_skip, ScanBlockPlan(7))
    ref = unrolled(x, d.A_bar, d.B_bar, p.C, p.D_skip)
    print(f"sequential vs oracle: {np.abs(seq - ref).max():.2e}")
    print(f"blocked vs sequential: {np.abs(blk - seq).max():.2e}\n")

    cfg = MambaConfig(d_model=128)
    print(f"{'L':>6} {'CMM FLOPs':>16} {'attention FLOPs':>16} {'CMM x2':>7} {'attn x2':>8}")
    prev = None
    for L in (256, 512, 1024, 2048, 4096, 8192):
        c, a = flops_cmm(L, L, cfg), flops_attention(L, 128)
        ratios = f"{c / prev[0]:7.3f} {a / prev[1]:8.3f}" if prev else ""
        print(f"{L:>6} {c:>16,d} {a:>16,d} {ratios}")
        prev = (c, a)


if __name__ == "__main__":
    main()
