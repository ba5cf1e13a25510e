"""Enhanced Mamba Fusion head.

CLS vectors of both modalities attend across, modulate each other through
cross-applied FiLM, are averaged and gated, then refined by a short residual
Mamba stack before answer classification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cmm import MambaConfig, MambaLayer
from .layers import Attention, LayerNorm, Linear, mean_rows
from .tensor import ContractError, Module, Tensor, constant_parameter


@dataclass(frozen=True)
class FusionConfig:
    d_model: int = 64
    answers: int = 16
    depth: int = 2
    cross_attention: bool = True
    literal_cls_keys: bool = False  # K&V = the other CLS token only
    mamba: MambaConfig | None = None

    def mamba_cfg(self) -> MambaConfig:
        return self.mamba or MambaConfig(self.d_model)


class FiLM(Module):
    """``(gamma, beta) = W h`` with ``W`` zero-initialised."""

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.proj = Linear(d_model, 2 * d_model, rng, zero=True)
        self.d_model = d_model

    def __call__(self, h: Tensor) -> tuple[Tensor, Tensor]:
        gb = self.proj(h)
        d = self.d_model
        return gb[..., :d], gb[..., d:]


def cls_cross_attend(host_cls: Tensor, other_seq: Tensor, attn: Attention | None) -> Tensor:
    """Single-query attention from ``host_cls`` (``1 x d``) over ``other_seq``.

    ``attn=None`` is the identity used when cross-attention is ablated.
    """
    if other_seq.shape[0] == 0:
        raise ContractError("cross-attention over an empty sequence")
    if attn is None:
        return host_cls
    return attn(host_cls, other_seq)


def film_modulate(attends_host: Tensor, attends_other: Tensor, film: FiLM) -> Tensor:
    """``(1 + gamma) * attends_other + beta`` with ``gamma, beta`` from ``attends_host``."""
    gamma, beta = film(attends_host)
    return attends_other + gamma * attends_other + beta


def fuse_gate(V_mod: Tensor, L_mod: Tensor, W_g: Linear) -> Tensor:
    joint = (V_mod + L_mod) * 0.5
    return joint * W_g(joint).sigmoid()


class MambaStack(Module):
    def __init__(self, cfg: MambaConfig, depth: int, rng: np.random.Generator):
        if depth < 1:
            raise ValueError("stack depth must be at least 1")
        self.layers = [MambaLayer(cfg, rng) for _ in range(depth)]
        self.norms = [LayerNorm(cfg.d_model) for _ in range(depth)]
        self.W_f = Linear(cfg.d_model, cfg.d_model, rng)
        self.out_norm = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return mamba_stack(x, self)

    def flops(self, T: int = 1) -> int:
        d = self.W_f.d_in
        n = sum(l.flops(T) + nm.flops(T) for l, nm in zip(self.layers, self.norms))
        return n + self.W_f.flops(T) + 4 * T * d + self.out_norm.flops(T)


def mamba_stack(F_gated: Tensor, stack: MambaStack) -> Tensor:
    """``X_i = LN(X_{i-1} + Mamba(X_{i-1}))``, then ``LN(X_N * sigmoid(W_f X_N))``."""
    x = F_gated
    for layer, norm in zip(stack.layers, stack.norms):
        x = norm(x + layer.delta(x))
    return stack.out_norm(x * stack.W_f(x).sigmoid())


class EMFHead(Module):
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.visual_cls_bias = constant_parameter(0.0, (1, d))
        if cfg.cross_attention:
            self.v_attends_l = Attention(d, 1, rng, out_proj=False)
            self.l_attends_v = Attention(d, 1, rng, out_proj=False)
        else:
            self.v_attends_l = self.l_attends_v = None
        self.film_v = FiLM(d, rng)
        self.film_l = FiLM(d, rng)
        self.W_g = Linear(d, d, rng)
        self.stack = MambaStack(cfg.mamba_cfg(), cfg.depth, rng)
        self.classifier = Linear(d, cfg.answers, rng)
        self.cfg = cfg

    def cls_tokens(self, visual: Tensor, text: Tensor) -> tuple[Tensor, Tensor]:
        return mean_rows(visual) + self.visual_cls_bias, text[0:1]

    def fuse(self, visual: Tensor, text: Tensor) -> Tensor:
        """Fused decision vector ``1 x d_model``."""
        V_cls, L_cls = self.cls_tokens(visual, text)
        literal = self.cfg.literal_cls_keys
        V_att = cls_cross_attend(V_cls, L_cls if literal else text, self.v_attends_l)
        L_att = cls_cross_attend(L_cls, V_cls if literal else visual, self.l_attends_v)
        V_mod = film_modulate(V_att, L_att, self.film_v)
        L_mod = film_modulate(L_att, V_att, self.film_l)
        return self.stack(fuse_gate(V_mod, L_mod, self.W_g))

    def __call__(self, visual: Tensor, text: Tensor) -> Tensor:
        """Answer logits ``1 x K``."""
        return answer_logits(self.fuse(visual, text), self.classifier)

    def attention_flops(self, T_V: int, T_L: int) -> int:
        if self.v_attends_l is None:
            return 0
        kv_l, kv_v = (1, 1) if self.cfg.literal_cls_keys else (T_L, T_V)
        return self.v_attends_l.flops(1, kv_l) + self.l_attends_v.flops(1, kv_v)

    def flops(self, T_V: int, T_L: int) -> dict[str, int]:
        d = self.cfg.d_model
        rest = T_V * d + 2 * d  # pooling and bias
        rest += 2 * (self.film_v.proj.flops(1) + 3 * d)
        rest += 2 * d + self.W_g.flops(1) + 4 * d  # average, gate
        rest += self.stack.flops(1) + self.classifier.flops(1)
        return {"fusion_attention": self.attention_flops(T_V, T_L), "fusion_head": rest}


def answer_logits(F_output: Tensor, classifier: Linear) -> Tensor:
    return classifier(F_output)
