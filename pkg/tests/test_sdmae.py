import numpy as np
import pytest
from hypothesis import given, strategies as st

from _gradcheck import max_rel_error, projector
from lcmf.cmm import CMMLayerConfig, MambaConfig
from lcmf.sdmae import (
    SDMAE,
    DiffusionStage,
    MaskPlan,
    SDMAEConfig,
    diffuse_stage,
    encode,
    mask_count,
    patchify,
    recon_loss,
    sample_mask,
    sdmae_forward,
    unpatchify,
)
from lcmf.tensor import ConfigurationError, ContractError, Tape, Tensor

TINY = SDMAEConfig(image_side=4, patch_size=2, channels=3, d_model=8, heads=2,
                   encoder_layers=2, decoder_layers=2, mamba=MambaConfig(8, state_dim=2, conv_width=2))


def model(seed=0, **kw):
    return SDMAE(TINY, np.random.default_rng(seed), **kw)


def rand(*shape, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(-2, 2, size=shape))


class TestPatches:
    def test_count(self):
        assert patchify(np.zeros((224, 224, 3)), 16).shape == (196, 16 * 16 * 3)

    def test_unit_patches_are_pixels(self):
        img = np.arange(12.0).reshape(2, 2, 3)
        np.testing.assert_array_equal(patchify(img, 1), img.reshape(4, 3))

    def test_row_major_order(self):
        img = np.zeros((4, 4, 1))
        img[0:2, 2:4] = 1.0  # top-right patch
        p = patchify(img, 2)
        assert p[1].sum() == 4 and p.sum() == 4

    @given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 3), st.integers(0, 1000))
    def test_round_trip(self, g, ps, c, seed):
        img = np.random.default_rng(seed).standard_normal((g * ps, g * ps, c))
        back = unpatchify(patchify(img, ps), ps, c)
        assert back.tobytes() == img.tobytes()
        assert unpatchify(Tensor(patchify(img, ps)), ps, c).data.tobytes() == img.tobytes()

    def test_bad_size(self):
        with pytest.raises(ConfigurationError):
            patchify(np.zeros((6, 6, 3)), 4)


class TestMask:
    def test_counts(self):
        plan = sample_mask(196, 0.75, 0)
        assert len(plan.masked) == 147 and len(plan.visible) == 49

    def test_ratio_zero(self):
        plan = sample_mask(16, 0.0, 0)
        assert len(plan.masked) == 0 and list(plan.visible) == list(range(16))

    def test_deterministic(self):
        a, b = sample_mask(64, 0.75, 42), sample_mask(64, 0.75, 42)
        assert np.array_equal(a.masked, b.masked) and np.array_equal(a.visible, b.visible)

    @given(st.integers(1, 500), st.floats(0, 0.999), st.integers(0, 2**32 - 1))
    def test_partition(self, P, ratio, seed):
        plan = sample_mask(P, ratio, seed)
        assert len(plan.masked) == mask_count(P, ratio) == int(np.floor(ratio * P + 0.5))
        both = np.concatenate([plan.visible, plan.masked])
        assert sorted(both) == list(range(P))
        assert plan.size == P

    @pytest.mark.parametrize("ratio", [1.0, -0.1])
    def test_bad_ratio(self, ratio):
        with pytest.raises(ConfigurationError):
            sample_mask(10, ratio, 0)


class TestReconLoss:
    def test_perfect(self):
        t = np.random.default_rng(0).standard_normal((4, 6))
        assert recon_loss(Tensor(t), t, sample_mask(4, 0.5, 0)).item() == 0.0

    def test_constant_patch_normalised(self):
        pred = np.array([[0.5, -1.0, 2.0], [1.0, 1.0, 1.0]])
        target = np.full((2, 3), 7.0)
        plan = MaskPlan(np.array([0]), np.array([1]), 0.5)
        assert recon_loss(Tensor(pred), target, plan, normalize=True).item() == pytest.approx(1.0, abs=1e-15)
        assert recon_loss(Tensor(pred), target, plan, normalize=True, masked_only=False).item() == pytest.approx(
            np.mean(pred**2), abs=1e-15)

    def test_two_patch_hand_case(self):
        pred = Tensor([[1.0, 2.0], [3.0, 5.0]])
        target = np.array([[0.0, 2.0], [3.0, 3.0]])
        plan = MaskPlan(np.array([0]), np.array([1]), 0.5)
        assert recon_loss(pred, target, plan).item() == 2.0  # (0 + 4) / 2
        assert recon_loss(pred, target, plan, masked_only=False).item() == 1.25  # (1 + 0 + 0 + 4) / 4

    def test_gradient_only_on_masked(self):
        pred = rand(6, 4)
        pred.requires_grad = True
        plan = sample_mask(6, 0.5, 3)
        with Tape() as tape:
            tape.backward(recon_loss(pred, np.zeros((6, 4)), plan))
        assert np.all(pred.grad[plan.visible] == 0)
        assert np.all(pred.grad[plan.masked] != 0)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            recon_loss(rand(3, 2), np.zeros((3, 3)), MaskPlan.full(3))


class TestEncode:
    def test_ratio_zero(self):
        m = model()
        patches = patchify(np.random.default_rng(0).uniform(0, 1, (4, 4, 3)), 2)
        F_e, F_v = encode(patches, sample_mask(4, 0.0, 0), m)
        assert F_e.data.tobytes() == F_v.data.tobytes()

    def test_rows_and_determinism(self):
        patches = patchify(np.random.default_rng(0).uniform(0, 1, (4, 4, 3)), 2)
        plan = sample_mask(4, 0.5, 1)
        F_e, F_v = model(seed=3).encode(patches, plan)
        assert F_e.shape == (4, 8) and F_v.shape == (2, 8)
        G_e, G_v = model(seed=3).encode(patches, plan)
        assert F_e.data.tobytes() == G_e.data.tobytes() and F_v.data.tobytes() == G_v.data.tobytes()


class TestDiffusion:
    def stage(self, seed=0):
        return DiffusionStage(TINY, CMMLayerConfig(1, 3), np.random.default_rng(seed))

    def test_single_key(self):
        st_ = self.stage()
        q, kv = rand(3, 8), rand(1, 8, seed=1)
        out = st_.attention(q, kv)
        value = (kv.data @ st_.attention.value.weight.data + st_.attention.value.bias.data)
        np.testing.assert_allclose(out.data, np.repeat(value, 3, axis=0), rtol=0, atol=1e-14)

    def test_empty_keys(self):
        with pytest.raises(ContractError):
            diffuse_stage(rand(2, 8), Tensor(np.zeros((0, 8))), rand(3, 8), self.stage())

    def test_width_mismatch(self):
        with pytest.raises(ConfigurationError):
            diffuse_stage(rand(2, 8), rand(3, 6), rand(3, 8), self.stage())

    def test_two_stage_rows(self):
        s1, s2 = self.stage(0), self.stage(1)
        F_e, F_v, F_m = rand(16, 8), rand(4, 8, seed=1), rand(12, 8, seed=2)
        F_vp = s1(F_v, F_e, F_e)
        F_mp = s2(F_m, F_vp, F_vp)
        assert F_vp.shape == (4, 8) and F_mp.shape == (12, 8)

    def test_gradient_through_both_stages(self):
        s1, s2 = self.stage(2), self.stage(3)
        F_e, F_v, F_m = rand(4, 8), rand(2, 8, seed=1), rand(2, 8, seed=2)
        R1, R2 = projector((2, 8)), projector((2, 8), seed=3)

        def f():
            F_vp = s1(F_v, F_e, F_e)
            return (F_vp * R1).sum() + (s2(F_m, F_vp, F_vp) * R2).sum()

        tensors = [F_e, F_v, F_m] + s1.parameters() + s2.parameters()
        assert max_rel_error(f, tensors, samples=6) < 1e-4


class TestForward:
    def test_shapes(self):
        m = model()
        img = np.random.default_rng(0).uniform(0, 1, (4, 4, 3))
        recon, feats = sdmae_forward(img, sample_mask(4, 0.5, 0), m)
        assert recon.shape == img.shape and feats.shape == (4, 8)

    def test_ratio_zero_skips_stage_two(self):
        m = model()
        img = np.random.default_rng(0).uniform(0, 1, (4, 4, 3))
        plan = sample_mask(4, 0.0, 0)
        feats = m.visual_semantics(patchify(img, 2), plan)
        F_e, _ = m.encode(patchify(img, 2), plan)
        assert feats.data.tobytes() == m.stage1(F_e, F_e, F_e).data.tobytes()
        assert "visual_decoder" not in m.flops(4)

    def test_reorder_restores_patch_positions(self):
        cfg = SDMAEConfig(image_side=8, patch_size=2, channels=1, d_model=8, heads=2,
                          encoder_layers=0, decoder_layers=0, mamba=MambaConfig(8, state_dim=2))
        m = SDMAE(cfg, np.random.default_rng(0))
        m.stage1 = lambda q, kv, c: q  # keep query rows as they are
        m.stage2 = lambda q, kv, c: q
        patches = np.zeros((16, 4))
        plan = sample_mask(16, 0.5, 5)
        k = int(plan.visible[len(plan.visible) // 2])
        patches[k] = 100.0
        feats = m.visual_semantics(patches, plan).data
        tokens = m.patch_embed(Tensor(patches)).data + m.pos_embed.data
        for i in plan.visible:
            np.testing.assert_array_equal(feats[i], tokens[i])
        for i in plan.masked:
            np.testing.assert_array_equal(feats[i], (m.mask_token.data + m.pos_embed.data[i])[0])
        assert np.abs(feats[k]).max() == np.abs(feats).max()

    def test_full_model_gradient(self):
        m = model(seed=4)
        img = np.random.default_rng(1).uniform(0, 1, (4, 4, 3))
        plan = sample_mask(4, 0.5, 2)
        target = patchify(img, 2)

        def f():
            recon, _ = m(img, plan)
            return recon_loss(patchify_tensor(recon), target, plan, masked_only=False)

        assert max_rel_error(f, m.parameters(), samples=2) < 1e-4

    def test_no_cmm_and_no_sam_variants_run(self):
        img = np.random.default_rng(0).uniform(0, 1, (4, 4, 3))
        for kw in ({"use_cmm": False}, {"sam_attention": False}):
            recon, _ = model(**kw)(img, sample_mask(4, 0.5, 0))
            assert recon.shape == img.shape


def patchify_tensor(recon: Tensor) -> Tensor:
    # differentiable patchify for a 4x4x3 reconstruction with 2x2 patches
    return recon.reshape(2, 2, 2, 2, 3).transpose(0, 2, 1, 3, 4).reshape(4, 12)
