"""Full model: masked autoencoder, text encoder, CMM interaction and fusion head.

CMM blocks are numbered globally for their ``alpha = l / L`` scaling: the two
diffusion stages are ``l = 1, 2`` and the interaction block is ``l = 3``.
"""

from __future__ import annotations

import numpy as np

from .cmm import CMMBypass, CMMLayerConfig, CrossModalityMamba
from .config import ModelConfig
from .fusion import EMFHead, FusionConfig
from .layers import AttentionSublayer
from .sdmae import SDMAE, MaskPlan, SDMAEConfig, patchify, recon_loss
from .text import MLMHead, MLMPlan, TextConfig, TextEncoder, mlm_loss
from .tensor import ConfigurationError, Module, Tensor

CMM_LAYERS = 3


class Interaction(Module):
    """CMM over both streams followed by mutual cross-attention sublayers."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        m = cfg.mamba()
        layer = CMMLayerConfig(3, CMM_LAYERS)
        self.cmm = CMMBypass(m) if cfg.no_cmm else CrossModalityMamba(m, layer, rng)
        self.visual_attn = AttentionSublayer(cfg.d_model, cfg.heads, rng)
        self.text_attn = AttentionSublayer(cfg.d_model, cfg.heads, rng)

    def __call__(self, visual: Tensor, text: Tensor) -> tuple[Tensor, Tensor]:
        z_v, z_l = self.cmm(visual, text)
        return self.visual_attn(z_v, z_l), self.text_attn(z_l, z_v)

    def flops(self, T_V: int, T_L: int) -> dict[str, int]:
        return {
            "interaction_cmm": self.cmm.flops(T_V, T_L),
            "interaction_attention": self.visual_attn.flops(T_V, T_L) + self.text_attn.flops(T_L, T_V),
        }


class LCMF(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        if cfg.vocab_size <= 5 or cfg.answers < 1:
            raise ConfigurationError("vocab_size (> 5) and answers (>= 1) must be resolved before building the model")
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        m = cfg.mamba()
        self.sdmae = SDMAE(
            SDMAEConfig(cfg.image_side, cfg.patch_size, cfg.channels, cfg.d_model, cfg.heads,
                        cfg.encoder_layers, cfg.decoder_layers, m),
            rng,
            cmm_layers=(CMMLayerConfig(1, CMM_LAYERS), CMMLayerConfig(2, CMM_LAYERS)),
            use_cmm=not cfg.no_cmm,
            sam_attention=not cfg.no_sam,
        )
        self.text = TextEncoder(TextConfig(cfg.vocab_size, cfg.d_model, cfg.heads, cfg.text_layers, cfg.max_len), rng)
        self.interaction = Interaction(cfg, rng)
        self.mlm_head = MLMHead(cfg.d_model, cfg.vocab_size, rng)
        self.fusion = EMFHead(
            FusionConfig(cfg.d_model, cfg.answers, cfg.fusion_depth,
                         cross_attention=not cfg.no_cross_attention,
                         literal_cls_keys=cfg.paper_literal, mamba=m),
            rng,
        )
        self.cfg = cfg

    @property
    def num_patches(self) -> int:
        return self.sdmae.cfg.num_patches

    def normalize_image(self, image: np.ndarray) -> np.ndarray:
        """8-bit (integer) or [0, 1] float pixels to the fixed channel standardisation."""
        raw = np.asarray(image)
        img = raw.astype(np.float64)
        if raw.dtype.kind in "ui":
            img /= 255.0
        return (img - self.cfg.pixel_mean) / self.cfg.pixel_std

    def pretrain_losses(
        self, image: np.ndarray, ids: np.ndarray, mask: MaskPlan, mlm: MLMPlan,
        normalize_target: bool = False, masked_only: bool = True,
    ) -> tuple[Tensor, Tensor]:
        """``(masked-patch MSE, MLM cross-entropy)`` for one image-caption pair.

        ``image`` is already standardised; ``ids`` is the corrupted caption.
        """
        patches = patchify(image, self.cfg.patch_size)
        visual = self.sdmae.visual_semantics(patches, mask)
        text = self.text(ids)
        v, l = self.interaction(visual, text)
        loss_img = recon_loss(self.sdmae.decode(v), patches, mask, normalize_target, masked_only)
        return loss_img, mlm_loss(l, mlm, self.mlm_head)

    def visual_features(self, frames: list[np.ndarray]) -> Tensor:
        """Unmasked visual semantics, mean-pooled over frames.

        Frames passed as the same array object are encoded once and weighted
        by their multiplicity.
        """
        plan = MaskPlan.full(self.num_patches)
        counts: dict[int, list] = {}
        for frame in frames:
            counts.setdefault(id(frame), [frame, 0])[1] += 1
        out = None
        for frame, k in counts.values():
            f = self.sdmae.visual_semantics(patchify(frame, self.cfg.patch_size), plan)
            f = f if k == 1 else f * float(k)
            out = f if out is None else out + f
        return out if len(frames) == 1 else out * (1.0 / len(frames))

    def answer_logits(self, frames: list[np.ndarray], question_ids: np.ndarray) -> Tensor:
        visual = self.visual_features(frames)
        text = self.text(question_ids)
        v, l = self.interaction(visual, text)
        return self.fusion(v, l)

    def flops(self, T_L: int, frames: int = 1) -> dict[str, int]:
        """Per-module analytic FLOPs of one answering forward pass."""
        rows = {k: frames * v for k, v in self.sdmae.flops().items()}
        if frames > 1:
            rows["visual_encoder"] += (frames - 1) * self.num_patches * self.cfg.d_model
        rows["text_encoder"] = self.text.flops(T_L)
        rows.update(self.interaction.flops(self.num_patches, T_L))
        rows.update(self.fusion.flops(self.num_patches, T_L))
        return rows


def count_parameters(model: Module) -> int:
    return model.num_parameters()
