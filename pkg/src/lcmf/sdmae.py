"""Semantics-diffusion masked autoencoder.

Images are cut into patches, a random subset is masked, and a shared
encoder maps both the full patch set and the visible subset to features.
Two cross-attention + CMM stages then enrich the visible features (queries
over the full set) and the mask-token features (queries over the enriched
visible set).  The two results are put back in patch order and decoded to
pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cmm import CMMBypass, CMMLayerConfig, CrossModalityMamba, MambaConfig
from .layers import Attention, Linear, TransformerBlock, learned
from .sam import SAMBlock
from .tensor import ConfigurationError, ContractError, Module, Tensor, concat


# --- patches and masks ------------------------------------------------------


def patchify(image, patch_size: int) -> np.ndarray:
    """``H x W x C`` image to ``P x (patch_size**2 * C)``; patches in row-major order."""
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    H, W, C = img.shape
    if H != W or H % patch_size:
        raise ConfigurationError(f"image {H}x{W} is not square or not divisible by patch size {patch_size}")
    g = H // patch_size
    return img.reshape(g, patch_size, g, patch_size, C).transpose(0, 2, 1, 3, 4).reshape(g * g, -1)


def unpatchify(patches, patch_size: int, channels: int):
    """Inverse of :func:`patchify`.  Accepts and returns a Tensor or an array."""
    P = patches.shape[0]
    g = int(round(P ** 0.5))
    if g * g != P:
        raise ConfigurationError(f"{P} patches do not form a square grid")
    if isinstance(patches, Tensor):
        t = patches.reshape(g, g, patch_size, patch_size, channels).transpose(0, 2, 1, 3, 4)
        return t.reshape(g * patch_size, g * patch_size, channels)
    a = np.asarray(patches).reshape(g, g, patch_size, patch_size, channels).transpose(0, 2, 1, 3, 4)
    return a.reshape(g * patch_size, g * patch_size, channels)


@dataclass(frozen=True)
class MaskPlan:
    visible: np.ndarray
    masked: np.ndarray
    ratio: float

    @property
    def size(self) -> int:
        return len(self.visible) + len(self.masked)

    @property
    def order(self) -> np.ndarray:
        """Patch indices in the concatenated ``[visible; masked]`` order."""
        return np.concatenate([self.visible, self.masked])

    @classmethod
    def full(cls, P: int) -> "MaskPlan":
        return cls(np.arange(P), np.zeros(0, dtype=np.int64), 0.0)


def mask_count(P: int, ratio: float) -> int:
    return int(np.floor(ratio * P + 0.5))


def sample_mask(P: int, ratio: float, rng_seed) -> MaskPlan:
    """Uniformly choose ``round(ratio * P)`` patches to mask."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigurationError(f"mask ratio must lie in [0, 1), got {ratio}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    perm = rng.permutation(P)
    k = mask_count(P, ratio)
    return MaskPlan(np.sort(perm[k:]), np.sort(perm[:k]), ratio)


def recon_loss(pred: Tensor, target, plan: MaskPlan, normalize: bool = False, masked_only: bool = True) -> Tensor:
    """Pixel MSE between predicted and target patch matrices.

    With ``normalize`` each target patch is standardised by its own mean and
    standard deviation first (eps 1e-6).
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigurationError(f"prediction {pred.shape} and target {target.shape} differ")
    if normalize:
        mu = target.mean(axis=-1, keepdims=True)
        var = target.var(axis=-1, keepdims=True)
        target = (target - mu) / np.sqrt(var + 1e-6)
    rows = plan.masked if masked_only else np.arange(pred.shape[0])
    if len(rows) == 0:
        return Tensor(0.0)
    diff = pred[rows] - Tensor(target[rows])
    return (diff * diff).mean()


# --- model ------------------------------------------------------------------


@dataclass(frozen=True)
class SDMAEConfig:
    image_side: int = 32
    patch_size: int = 4
    channels: int = 3
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 4
    decoder_layers: int = 2
    mamba: MambaConfig = field(default_factory=lambda: MambaConfig(64))

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def build_stack(cfg: SDMAEConfig, depth: int, rng: np.random.Generator, sam_attention: bool) -> list[Module]:
    """Alternate transformer-style and SAM blocks, starting with a transformer block."""
    return [
        TransformerBlock(cfg.d_model, cfg.heads, rng)
        if i % 2 == 0
        else SAMBlock(cfg.mamba, cfg.heads, rng, attention=sam_attention)
        for i in range(depth)
    ]


def run_stack(blocks, x: Tensor) -> Tensor:
    for block in blocks:
        x = block(x)
    return x


class DiffusionStage(Module):
    """Cross-attention from queries to a key/value set, then a CMM pass."""

    def __init__(self, cfg: SDMAEConfig, layer: CMMLayerConfig, rng: np.random.Generator, use_cmm: bool = True):
        self.attention = Attention(cfg.d_model, cfg.heads, rng, out_proj=False)
        self.cmm = CrossModalityMamba(cfg.mamba, layer, rng) if use_cmm else CMMBypass(cfg.mamba)

    def __call__(self, F_q: Tensor, F_kv_attn: Tensor, F_kv_cmm: Tensor) -> Tensor:
        return diffuse_stage(F_q, F_kv_attn, F_kv_cmm, self)

    def flops(self, T_q: int, T_kv: int, T_cmm: int) -> dict[str, int]:
        return {
            "attention": self.attention.flops(T_q, T_kv),
            "cmm": self.cmm.flops(T_q, T_cmm, visual_only=True),
        }


def diffuse_stage(F_q: Tensor, F_kv_attn: Tensor, F_kv_cmm: Tensor, stage: DiffusionStage) -> Tensor:
    if F_kv_attn.shape[0] == 0:
        raise ContractError("diffusion stage needs at least one key")
    if F_q.shape[1] != F_kv_attn.shape[1] or F_q.shape[1] != F_kv_cmm.shape[1]:
        raise ConfigurationError(f"feature widths differ: {F_q.shape}, {F_kv_attn.shape}, {F_kv_cmm.shape}")
    attended = stage.attention(F_q, F_kv_attn)
    enhanced, _ = stage.cmm(attended, F_kv_cmm, visual_only=True)
    return enhanced


class SDMAE(Module):
    def __init__(
        self,
        cfg: SDMAEConfig,
        rng: np.random.Generator,
        cmm_layers: tuple[CMMLayerConfig, CMMLayerConfig] = (CMMLayerConfig(1, 2), CMMLayerConfig(2, 2)),
        use_cmm: bool = True,
        sam_attention: bool = True,
    ):
        P, D = cfg.num_patches, cfg.d_model
        self.patch_embed = Linear(cfg.patch_dim, D, rng)
        self.pos_embed = learned((P, D), rng)
        self.encoder = build_stack(cfg, cfg.encoder_layers, rng, sam_attention)
        self.stage1 = DiffusionStage(cfg, cmm_layers[0], rng, use_cmm)
        self.stage2 = DiffusionStage(cfg, cmm_layers[1], rng, use_cmm)
        self.mask_token = learned((1, D), rng)
        self.decoder = build_stack(cfg, cfg.decoder_layers, rng, sam_attention)
        self.head = Linear(D, cfg.patch_dim, rng)
        self.cfg = cfg

    def encode(self, patches, plan: MaskPlan) -> tuple[Tensor, Tensor]:
        """Return ``(F_e, F_v)`` for the full and the visible patch sets."""
        tokens = self.patch_embed(_tensor(patches)) + self.pos_embed
        F_e = run_stack(self.encoder, tokens)
        if len(plan.visible) == plan.size and np.array_equal(plan.visible, np.arange(plan.size)):
            return F_e, F_e
        return F_e, run_stack(self.encoder, tokens[plan.visible])

    def visual_semantics(self, patches, plan: MaskPlan) -> Tensor:
        """Encoder plus both diffusion stages; ``P x d_model`` in patch order."""
        F_e, F_v = self.encode(patches, plan)
        F_vp = self.stage1(F_v, F_e, F_e)
        if len(plan.masked) == 0:
            parts, order = F_vp, plan.visible
        else:
            F_m = self.mask_token + self.pos_embed[plan.masked]
            F_mp = self.stage2(F_m, F_vp, F_vp)
            parts, order = concat([F_vp, F_mp], axis=0), plan.order
        if np.array_equal(order, np.arange(len(order))):
            return parts
        return parts[np.argsort(order, kind="stable")]

    def decode(self, features: Tensor) -> Tensor:
        """Per-patch pixel predictions, ``P x patch_dim``."""
        return self.head(run_stack(self.decoder, features))

    def __call__(self, image, plan: MaskPlan) -> tuple[Tensor, Tensor]:
        return sdmae_forward(image, plan, self)

    def flops(self, plan_visible: int | None = None, include_decoder: bool = False) -> dict[str, int]:
        cfg = self.cfg
        P = cfg.num_patches
        V = P if plan_visible is None else plan_visible
        M = P - V
        enc = self.patch_embed.flops(P) + P * cfg.d_model + sum(b.flops(P) for b in self.encoder)
        if V != P:
            enc += sum(b.flops(V) for b in self.encoder)
        s1 = self.stage1.flops(V, P, P)
        rows = {
            "visual_encoder": enc,
            "diffusion_attention": s1["attention"],
            "diffusion_cmm": s1["cmm"],
        }
        if M:
            s2 = self.stage2.flops(M, V, V)
            rows["diffusion_attention"] += s2["attention"] + M * cfg.d_model
            rows["diffusion_cmm"] += s2["cmm"]
        if include_decoder:
            rows["visual_decoder"] = sum(b.flops(P) for b in self.decoder) + self.head.flops(P)
        return rows


def sdmae_forward(image, plan: MaskPlan, model: SDMAE) -> tuple[Tensor, Tensor]:
    """Reconstruct ``image`` (``H x W x C``) and return ``(reconstruction, visual_features)``."""
    cfg = model.cfg
    patches = patchify(image, cfg.patch_size)
    features = model.visual_semantics(patches, plan)
    pixels = model.decode(features)
    return unpatchify(pixels, cfg.patch_size, cfg.channels), features


def encode(patches, plan: MaskPlan, model: SDMAE) -> tuple[Tensor, Tensor]:
    return model.encode(patches, plan)


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
