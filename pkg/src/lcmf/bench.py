"""Analytic FLOPs tables and the CMM-vs-attention scaling benchmark."""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .cmm import CMMLayerConfig, CrossModalityMamba, MambaConfig
from .config import ModelConfig
from .layers import AttentionSublayer
from .model import LCMF
from .tensor import ConfigurationError, Tensor, no_tape

BENCH_HEADER = ("length", "cmm_ns", "attn_ns", "cmm_flops", "attn_flops")


# --- FLOPs table -------------------------------------------------------------


def flops_table(cfg: ModelConfig, text_len: int = 8, frames: int = 1) -> dict[str, int]:
    """Per-module FLOPs of one answering forward pass plus their ``total``."""
    # counts do not depend on vocabulary sizes except through the classifier
    cfg = dataclasses.replace(cfg, vocab_size=cfg.vocab_size or 64, answers=cfg.answers or 16)
    rows = LCMF(cfg, 0).flops(text_len, frames)
    rows["total"] = sum(rows.values())
    return rows


def format_table(rows: dict[str, int]) -> str:
    width = max(len(k) for k in rows)
    return "\n".join(f"{k:<{width}}  {v:>16,d}" for k, v in rows.items())


# --- benchmark ---------------------------------------------------------------


@dataclass
class BenchReport:
    lengths: list[int]
    cmm_ns: list[float]
    attn_ns: list[float]
    cmm_flops: list[int]
    attn_flops: list[int]
    slope_cmm: float
    slope_attn: float
    flops_slope_cmm: float
    flops_slope_attn: float
    crossover_flops: int | None
    crossover_time: int | None

    def doubling_ratios(self, which: str) -> list[float]:
        f = self.cmm_flops if which == "cmm" else self.attn_flops
        return [b / a for a, b, la, lb in zip(f, f[1:], self.lengths, self.lengths[1:]) if lb == 2 * la]

    def summary(self) -> str:
        lines = [
            f"wall-time log-log slope: cmm {self.slope_cmm:.3f}, attention {self.slope_attn:.3f}",
            f"FLOPs log-log slope:     cmm {self.flops_slope_cmm:.3f}, attention {self.flops_slope_attn:.3f}",
            f"crossover length (FLOPs): {self.crossover_flops}",
            f"crossover length (time):  {self.crossover_time}",
        ]
        return "\n".join(lines)


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def _first(lengths, a, b) -> int | None:
    for L, x, y in zip(lengths, a, b):
        if x < y:
            return L
    return None


def cmd_bench(lengths: Sequence[int], d_model: int = 128, repeats: int = 3, heads: int = 4, seed: int = 0) -> BenchReport:
    """Median wall time of an isolated CMM block (both streams of length ``L``)
    and an isolated self-attention sublayer, with analytic FLOPs."""
    lengths = [int(L) for L in lengths]
    if len(lengths) < 4:
        raise ConfigurationError("the benchmark needs at least 4 lengths")
    if repeats < 1:
        raise ConfigurationError("repeats must be >= 1")
    if any(b <= a for a, b in zip(lengths, lengths[1:])) or lengths[0] < 1:
        raise ConfigurationError("lengths must be positive and strictly increasing")
    rng = np.random.default_rng(seed)
    mcfg = MambaConfig(d_model)
    cmm = CrossModalityMamba(mcfg, CMMLayerConfig(1, 1), rng)
    attn = AttentionSublayer(d_model, heads, rng)
    times = {L: ([], []) for L in lengths}
    inputs = {L: (Tensor(rng.standard_normal((L, d_model))), Tensor(rng.standard_normal((L, d_model)))) for L in lengths}
    with no_tape():
        for _ in range(repeats):  # interleave repeats across lengths
            for L in lengths:
                v, l = inputs[L]
                t0 = time.perf_counter_ns()
                cmm(v, l)
                t1 = time.perf_counter_ns()
                attn(v)
                t2 = time.perf_counter_ns()
                times[L][0].append(t1 - t0)
                times[L][1].append(t2 - t1)
    cmm_ns = [float(np.median(times[L][0])) for L in lengths]
    attn_ns = [float(np.median(times[L][1])) for L in lengths]
    cmm_flops = [cmm.flops(L, L) for L in lengths]
    attn_flops = [attn.flops(L) for L in lengths]
    return BenchReport(
        lengths, cmm_ns, attn_ns, cmm_flops, attn_flops,
        loglog_slope(lengths, cmm_ns), loglog_slope(lengths, attn_ns),
        loglog_slope(lengths, cmm_flops), loglog_slope(lengths, attn_flops),
        _first(lengths, cmm_flops, attn_flops), _first(lengths, cmm_ns, attn_ns),
    )


def write_bench_csv(report: BenchReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_HEADER)
        for row in zip(report.lengths, report.cmm_ns, report.attn_ns, report.cmm_flops, report.attn_flops):
            w.writerow([row[0], int(row[1]), int(row[2]), row[3], row[4]])


def doubling_lengths(start: int = 256, stop: int = 8192) -> list[int]:
    return [start << k for k in range(int(math.log2(stop // start)) + 1)]
