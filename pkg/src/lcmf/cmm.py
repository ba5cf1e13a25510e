"""Selective-SSM mixers and the Cross-Modality Mamba block.

A stream is projected and split into an SSM branch ``U_ssm`` and a
convolution branch ``U_conv``.  The transition ``A`` and step ``delta`` come
from the stream's own ``U_ssm``; ``B`` and ``C`` come from a generator shared
by both streams whose input is the host ``U_ssm`` concatenated with the
other stream's mean-pooled ``U_ssm`` scaled by ``alpha = l / L``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .layers import ACT_FLOPS, DepthwiseConv1d, LayerNorm, Linear, flops_layer_norm, flops_linear, mean_rows
from .scan import flops_scan, selective_scan
from .tensor import ConfigurationError, Module, Tensor, activation, concat, constant_parameter


@dataclass(frozen=True)
class MambaConfig:
    d_model: int
    expand: int = 2
    state_dim: int = 16
    conv_width: int = 4
    stable_mode: bool = True
    block_length: int | None = None  # None: a single block

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


@dataclass(frozen=True)
class CMMLayerConfig:
    """Position of a CMM block in the model's stack of CMM blocks.

    ``layer_index`` is 1-based; index 0 is accepted to switch the
    cross-modal term off entirely.
    """

    layer_index: int
    total_layers: int

    def __post_init__(self) -> None:
        if self.total_layers < 1 or not 0 <= self.layer_index <= self.total_layers:
            raise ConfigurationError(f"layer index {self.layer_index} outside [0, {self.total_layers}]")

    @property
    def alpha(self) -> float:
        return self.layer_index / self.total_layers


class ModalityStream(NamedTuple):
    tokens: Tensor
    modality: str  # "visual" | "linguistic"

    @property
    def length(self) -> int:
        return self.tokens.shape[0]


class CMMOutputs(NamedTuple):
    visual: Tensor
    linguistic: Tensor


class BCGenerator(Module):
    """``B, C = SiLU(causal_conv(W [U_host; alpha * pooled(U_other)] + b))``."""

    def __init__(self, cfg: MambaConfig, rng: np.random.Generator, cross: bool):
        d_in = cfg.d_inner * (2 if cross else 1)
        self.B_proj = Linear(d_in, cfg.state_dim, rng)
        self.B_conv = DepthwiseConv1d(cfg.state_dim, cfg.conv_width, rng)
        self.C_proj = Linear(d_in, cfg.state_dim, rng)
        self.C_conv = DepthwiseConv1d(cfg.state_dim, cfg.conv_width, rng)
        self.cross = cross
        self.d_inner = cfg.d_inner

    def flops(self, T: int, T_other: int = 0) -> int:
        n = 0
        if self.cross:
            n += T_other * self.d_inner  # mean pool of the other stream
            n += T * self.d_inner  # alpha scaling per host position
        for proj, conv in ((self.B_proj, self.B_conv), (self.C_proj, self.C_conv)):
            n += proj.flops(T) + conv.flops(T) + ACT_FLOPS["silu"] * T * proj.d_out
        return n


def shared_BC(U_host: Tensor, U_other: Tensor | None, alpha: float, bc: BCGenerator) -> tuple[Tensor, Tensor]:
    """Input and output projections for the host stream.

    An absent or empty other stream contributes a zero summary.
    """
    if bc.cross:
        T = U_host.shape[0]
        if U_other is None or U_other.shape[0] == 0:
            summary = Tensor(np.zeros((1, bc.d_inner)))
        else:
            summary = mean_rows(U_other)
        inp = concat([U_host, summary * Tensor(np.full((T, 1), float(alpha)))], axis=1)
    else:
        inp = U_host
    B = activation(bc.B_conv(bc.B_proj(inp)), "silu")
    C = activation(bc.C_conv(bc.C_proj(inp)), "silu")
    return B, C


class SelectiveMixer(Module):
    """Stream-private part of a selective-SSM layer."""

    def __init__(self, cfg: MambaConfig, rng: np.random.Generator):
        d, e = cfg.d_model, cfg.d_inner
        self.norm = LayerNorm(d)
        self.in_proj = Linear(d, 2 * e, rng)
        self.A_proj = Linear(e, e, rng)
        self.dt_proj = Linear(e, e, rng)
        self.gate_conv = DepthwiseConv1d(e, cfg.conv_width, rng)
        self.D_skip = constant_parameter(1.0, (e,))
        self.out_proj = Linear(e, d, rng)
        self.cfg = cfg

    def project_split(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(LayerNorm(x), U_ssm, U_conv)``."""
        e = self.cfg.d_inner
        n = self.norm(x)
        u = self.in_proj(n)
        return n, u[:, :e], u[:, e:]

    def A_delta(self, U_ssm: Tensor) -> tuple[Tensor, Tensor]:
        A = activation(self.A_proj(U_ssm), "sigmoid")
        delta = activation(self.dt_proj(U_ssm), "softplus")
        return A, delta

    def mix(self, U_ssm: Tensor, U_conv: Tensor, B: Tensor, C: Tensor) -> Tensor:
        A, delta = self.A_delta(U_ssm)
        y = selective_scan(
            U_ssm, A, delta, B, C, self.D_skip,
            stable_mode=self.cfg.stable_mode, block_length=self.cfg.block_length,
        )
        gated = y * activation(self.gate_conv(U_conv), "sigmoid")
        return self.out_proj(gated)

    def flops(self, T: int) -> int:
        """Everything except the B/C generator."""
        c = self.cfg
        d, e, N = c.d_model, c.d_inner, c.state_dim
        n = self.norm.flops(T) + self.in_proj.flops(T)
        n += self.A_proj.flops(T) + ACT_FLOPS["sigmoid"] * T * e
        n += self.dt_proj.flops(T) + ACT_FLOPS["softplus"] * T * e
        # discretisation: sign, A*delta, exp, expm1/A*delta (3), outer product with B
        n += T * e * (5 + N + (1 if c.stable_mode else 0))
        n += flops_scan(T, e, N)
        n += self.gate_conv.flops(T) + ACT_FLOPS["sigmoid"] * T * e + T * e
        n += self.out_proj.flops(T)
        return n


def modality_A_delta(U_host: Tensor, mixer: SelectiveMixer) -> tuple[Tensor, Tensor]:
    return mixer.A_delta(U_host)


class MambaLayer(Module):
    """Unimodal selective-SSM layer; ``layer(x) = x + layer.delta(x)``."""

    def __init__(self, cfg: MambaConfig, rng: np.random.Generator):
        self.mixer = SelectiveMixer(cfg, rng)
        self.bc = BCGenerator(cfg, rng, cross=False)

    def delta(self, x: Tensor) -> Tensor:
        _, U_ssm, U_conv = self.mixer.project_split(x)
        B, C = shared_BC(U_ssm, None, 0.0, self.bc)
        return self.mixer.mix(U_ssm, U_conv, B, C)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.delta(x)

    def flops(self, T: int) -> int:
        return self.mixer.flops(T) + self.bc.flops(T) + T * self.mixer.cfg.d_model


def mamba_preproc(stream: ModalityStream, layer: MambaLayer) -> ModalityStream:
    return ModalityStream(layer(stream.tokens), stream.modality)


class CMMStream(Module):
    def __init__(self, cfg: MambaConfig, rng: np.random.Generator):
        self.preproc = MambaLayer(cfg, rng)
        self.mixer = SelectiveMixer(cfg, rng)
        self.norm_out = LayerNorm(cfg.d_model)

    def flops(self, T: int, T_other: int, bc: BCGenerator) -> int:
        if T == 0:
            return 0
        d = self.mixer.cfg.d_model
        return self.preproc.flops(T) + self.mixer.flops(T) + bc.flops(T, T_other) + T * d + self.norm_out.flops(T)


class CrossModalityMamba(Module):
    """Two-stream CMM block with B/C generation shared across modalities."""

    def __init__(self, cfg: MambaConfig, layer: CMMLayerConfig, rng: np.random.Generator):
        self.visual = CMMStream(cfg, rng)
        self.linguistic = CMMStream(cfg, rng)
        self.bc = BCGenerator(cfg, rng, cross=True)
        self.layer = layer
        self.cfg = cfg

    @property
    def alpha(self) -> float:
        return self.layer.alpha

    def __call__(self, v: Tensor, l: Tensor, visual_only: bool = False) -> tuple[Tensor, Tensor | None]:
        """Return ``(Z_V, Z_L)``; with ``visual_only`` the second stream only
        supplies its pooled summary and ``Z_L`` is ``None``."""
        d = self.cfg.d_model
        for t in (v, l):
            if t.ndim != 2 or t.shape[1] != d:
                raise ConfigurationError(f"CMM streams must be T x {d}, got {v.shape} and {l.shape}")
        # both streams read the same pre-interaction snapshots
        prepared = []
        for stream, x in ((self.visual, v), (self.linguistic, l)):
            if x.shape[0] == 0:
                prepared.append(None)
                continue
            X = stream.preproc(x)
            prepared.append(stream.mixer.project_split(X))
        outputs = []
        for i, (stream, x) in enumerate(((self.visual, v), (self.linguistic, l))):
            mine, other = prepared[i], prepared[1 - i]
            if i == 1 and visual_only:
                outputs.append(None)
                continue
            if mine is None:
                outputs.append(x)
                continue
            n, U_ssm, U_conv = mine
            B, C = shared_BC(U_ssm, None if other is None else other[1], self.alpha, self.bc)
            outputs.append(stream.norm_out(n + stream.mixer.mix(U_ssm, U_conv, B, C)))
        return outputs[0], outputs[1]

    def flops(self, T_V: int, T_L: int, visual_only: bool = False) -> int:
        if visual_only:
            # the second stream is only preprocessed, normalised and projected
            s = self.linguistic
            summary = s.preproc.flops(T_L) + s.mixer.norm.flops(T_L) + s.mixer.in_proj.flops(T_L)
            return self.visual.flops(T_V, T_L, self.bc) + summary
        return self.visual.flops(T_V, T_L, self.bc) + self.linguistic.flops(T_L, T_V, self.bc)


class CMMBypass(Module):
    """Ablation stand-in: each stream is only layer-normalised."""

    def __init__(self, cfg: MambaConfig):
        self.visual = LayerNorm(cfg.d_model)
        self.linguistic = LayerNorm(cfg.d_model)

    def __call__(self, v: Tensor, l: Tensor, visual_only: bool = False) -> tuple[Tensor, Tensor | None]:
        z_v = self.visual(v) if v.shape[0] else v
        if visual_only:
            return z_v, None
        return z_v, (self.linguistic(l) if l.shape[0] else l)

    def flops(self, T_V: int, T_L: int, visual_only: bool = False) -> int:
        return self.visual.flops(T_V) + (0 if visual_only else self.linguistic.flops(T_L))


def cmm_forward(v: ModalityStream, l: ModalityStream, block: CrossModalityMamba | CMMBypass) -> CMMOutputs:
    z_v, z_l = block(v.tokens, l.tokens)
    return CMMOutputs(z_v, z_l)


def flops_cmm(T_V: int, T_L: int, cfg: MambaConfig) -> int:
    """Analytic FLOPs of one CMM block for stream lengths ``T_V`` and ``T_L``."""
    block = CrossModalityMamba(cfg, CMMLayerConfig(1, 1), np.random.default_rng(0))
    return block.flops(T_V, T_L)


def flops_mamba_layer(T: int, cfg: MambaConfig) -> int:
    return MambaLayer(cfg, np.random.default_rng(0)).flops(T)


__all__ = [
    "BCGenerator",
    "CMMBypass",
    "CMMLayerConfig",
    "CMMOutputs",
    "CrossModalityMamba",
    "MambaConfig",
    "MambaLayer",
    "ModalityStream",
    "SelectiveMixer",
    "cmm_forward",
    "flops_cmm",
    "flops_layer_norm",
    "flops_linear",
    "flops_mamba_layer",
    "mamba_preproc",
    "modality_A_delta",
    "shared_BC",
]
