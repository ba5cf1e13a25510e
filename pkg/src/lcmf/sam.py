"""Self-Attention Mamba block: global self-attention followed by a selective scan."""

from __future__ import annotations

import numpy as np

from .cmm import MambaConfig, MambaLayer
from .layers import AttentionSublayer, LayerNorm
from .tensor import Module, Tensor


def self_attention(x: Tensor, sublayer: AttentionSublayer) -> Tensor:
    """``LayerNorm(x + MultiHeadAttention(x))`` without any causal mask."""
    return sublayer(x)


class SAMBlock(Module):
    """Attention sublayer then Mamba sublayer, both post-norm residual.

    With ``attention=False`` (the no-SAM ablation) only the Mamba sublayer
    remains.
    """

    def __init__(self, cfg: MambaConfig, heads: int, rng: np.random.Generator, attention: bool = True):
        self.attention = AttentionSublayer(cfg.d_model, heads, rng) if attention else None
        self.mamba = MambaLayer(cfg, rng)
        self.norm = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor) -> Tensor:
        if self.attention is not None:
            x = self.attention(x)
        return self.norm(self.mamba(x))

    def flops(self, T: int) -> int:
        n = self.mamba.flops(T) + self.norm.flops(T)
        if self.attention is not None:
            n += self.attention.flops(T)
        return n


def sam_forward(x: Tensor, block: SAMBlock) -> Tensor:
    return block(x)


def flops_attention(T: int, d_model: int, heads: int = 4) -> int:
    """FLOPs of one self-attention sublayer (projections, softmax attention,
    output projection, residual and LayerNorm) over ``T`` tokens."""
    return AttentionSublayer(d_model, heads, np.random.default_rng(0)).flops(T)
