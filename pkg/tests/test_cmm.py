import copy

import numpy as np
import pytest
from hypothesis import given, strategies as st

from _gradcheck import max_rel_error, projector
from lcmf.cmm import (
    CMMBypass,
    CMMLayerConfig,
    CrossModalityMamba,
    MambaConfig,
    MambaLayer,
    ModalityStream,
    cmm_forward,
    flops_cmm,
    mamba_preproc,
    modality_A_delta,
    shared_BC,
)
from lcmf.sam import flops_attention
from lcmf.scan import selective_scan
from lcmf.tensor import ConfigurationError, Tensor, activation, conv1d, layer_norm, matmul

TINY = MambaConfig(d_model=6, expand=2, state_dim=2, conv_width=3)


def block(cfg=TINY, l=1, L=2, seed=0):
    return CrossModalityMamba(cfg, CMMLayerConfig(l, L), np.random.default_rng(seed))


def rand(*shape, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(-2, 2, size=shape))


class TestAlpha:
    def test_values(self):
        assert CMMLayerConfig(1, 4).alpha == 0.25
        assert CMMLayerConfig(4, 4).alpha == 1.0

    @given(st.integers(1, 1000))
    def test_last_layer_is_exactly_one_and_monotone(self, L):
        alphas = [CMMLayerConfig(l, L).alpha for l in range(1, L + 1)]
        assert alphas[-1] == 1.0
        assert all(a < b for a, b in zip(alphas, alphas[1:]))
        assert all(0 < a <= 1 for a in alphas)

    @pytest.mark.parametrize("l,L", [(5, 4), (-1, 3), (1, 0)])
    def test_out_of_range(self, l, L):
        with pytest.raises(ConfigurationError):
            CMMLayerConfig(l, L)


class TestPreproc:
    def test_zero_output_projection_is_identity(self):
        layer = MambaLayer(TINY, np.random.default_rng(1))
        layer.mixer.out_proj.zero_()
        x = rand(5, 6)
        out = mamba_preproc(ModalityStream(x, "visual"), layer)
        assert out.modality == "visual"
        assert out.tokens.data.tobytes() == x.data.tobytes()

    def test_single_token(self):
        layer = MambaLayer(TINY, np.random.default_rng(1))
        assert layer(rand(1, 6)).shape == (1, 6)

    def test_matches_hand_composition(self):
        layer = MambaLayer(TINY, np.random.default_rng(2))
        x = rand(7, 6)
        m, bc, e = layer.mixer, layer.bc, TINY.d_inner

        def lin(t, p):
            return matmul(t, p.weight) + p.bias

        n = layer_norm(x, m.norm.gain, m.norm.bias, 1e-5)
        u = lin(n, m.in_proj)
        U, G = u[:, :e], u[:, e:]
        B = activation(conv1d(lin(U, bc.B_proj), bc.B_conv.kernel, bc.B_conv.bias), "silu")
        C = activation(conv1d(lin(U, bc.C_proj), bc.C_conv.kernel, bc.C_conv.bias), "silu")
        A = activation(lin(U, m.A_proj), "sigmoid")
        dt = activation(lin(U, m.dt_proj), "softplus")
        y = selective_scan(U, A, dt, B, C, m.D_skip)
        gate = activation(conv1d(G, m.gate_conv.kernel, m.gate_conv.bias), "sigmoid")
        expect = x + lin(y * gate, m.out_proj)
        assert layer(x).data.tobytes() == expect.data.tobytes()


class TestProjectSplit:
    def test_identity_block_projection(self):
        cfg = MambaConfig(d_model=4, expand=1, state_dim=2)
        layer = MambaLayer(cfg, np.random.default_rng(0))
        m = layer.mixer
        m.in_proj.weight.data[...] = np.hstack([np.eye(4), np.zeros((4, 4))])
        x = rand(5, 4)
        n, U_ssm, U_conv = m.project_split(x)
        np.testing.assert_array_equal(U_ssm.data, n.data)
        np.testing.assert_array_equal(U_conv.data, 0.0)
        assert n.data.tobytes() == layer_norm(x, m.norm.gain, m.norm.bias).data.tobytes()

    def test_shapes(self):
        _, a, b = MambaLayer(TINY, np.random.default_rng(0)).mixer.project_split(rand(5, 6))
        assert a.shape == b.shape == (5, TINY.d_inner)

    def test_gradient_reaches_both_halves(self):
        layer = MambaLayer(TINY, np.random.default_rng(3))
        x = rand(4, 6)
        R = projector((4, 6))
        W = layer.mixer.in_proj.weight
        assert max_rel_error(lambda: (layer(x) * R).sum(), [W]) < 1e-4
        e = TINY.d_inner
        assert np.abs(W.grad[:, :e]).sum() > 0 and np.abs(W.grad[:, e:]).sum() > 0


class TestSharedBC:
    def setup_method(self):
        self.blk = block()
        self.U = rand(5, TINY.d_inner)
        self.O = rand(3, TINY.d_inner, seed=1)

    def test_alpha_zero_is_unimodal(self):
        bc = self.blk.bc
        B0, C0 = shared_BC(self.U, self.O, 0.0, bc)
        B1, C1 = shared_BC(self.U, None, 0.7, bc)
        assert B0.data.tobytes() == B1.data.tobytes() and C0.data.tobytes() == C1.data.tobytes()
        # the host-only half of the generator gives the same answer
        e = TINY.d_inner
        pre = matmul(self.U, Tensor(bc.B_proj.weight.data[:e])) + bc.B_proj.bias
        B_host = activation(conv1d(pre, bc.B_conv.kernel, bc.B_conv.bias), "silu")
        np.testing.assert_allclose(B0.data, B_host.data, rtol=0, atol=1e-14)

    def test_zero_other_ignores_alpha(self):
        zero = Tensor(np.zeros((3, TINY.d_inner)))
        outs = {shared_BC(self.U, zero, a, self.blk.bc)[0].data.tobytes() for a in (0.0, 0.3, 1.0)}
        assert len(outs) == 1

    def test_empty_other(self):
        empty = Tensor(np.zeros((0, TINY.d_inner)))
        a = shared_BC(self.U, empty, 1.0, self.blk.bc)[1]
        b = shared_BC(self.U, None, 1.0, self.blk.bc)[1]
        assert a.data.tobytes() == b.data.tobytes()

    def test_uses_pooled_other(self):
        B1, _ = shared_BC(self.U, self.O, 1.0, self.blk.bc)
        shuffled = Tensor(self.O.data[::-1].copy())
        B2, _ = shared_BC(self.U, shuffled, 1.0, self.blk.bc)
        np.testing.assert_allclose(B1.data, B2.data, rtol=1e-13)
        B3, _ = shared_BC(self.U, Tensor(self.O.data + 1), 1.0, self.blk.bc)
        assert not np.allclose(B1.data, B3.data)
        assert B1.shape == (5, TINY.state_dim)


class TestADelta:
    def test_zero_parameters(self):
        mixer = MambaLayer(TINY, np.random.default_rng(0)).mixer
        mixer.A_proj.zero_()
        mixer.dt_proj.zero_()
        A, dt = modality_A_delta(rand(4, TINY.d_inner), mixer)
        np.testing.assert_array_equal(A.data, 0.5)
        np.testing.assert_allclose(dt.data, np.log(2), rtol=0, atol=1e-15)

    def test_delta_positive(self):
        mixer = MambaLayer(TINY, np.random.default_rng(0)).mixer
        U = Tensor(np.random.default_rng(5).standard_normal((10_000, TINY.d_inner)) * 3)
        _, dt = modality_A_delta(U, mixer)
        assert dt.size >= 10**5 and np.all(dt.data > 0)

    def test_gradient(self):
        mixer = MambaLayer(TINY, np.random.default_rng(0)).mixer
        U = rand(3, TINY.d_inner)
        R1, R2 = projector((3, TINY.d_inner)), projector((3, TINY.d_inner), seed=7)

        def f():
            A, dt = modality_A_delta(U, mixer)
            return (A * R1).sum() + (dt * R2).sum()

        assert max_rel_error(f, [U, mixer.A_proj.weight, mixer.A_proj.bias, mixer.dt_proj.weight]) < 1e-4


class TestForward:
    def test_swap_symmetry(self):
        blk = block(seed=4)
        mirror = copy.copy(blk)
        mirror.visual, mirror.linguistic = blk.linguistic, blk.visual
        v, l = rand(4, 6), rand(3, 6, seed=1)
        zv, zl = blk(v, l)
        ml, mv = mirror(l, v)
        assert zv.data.tobytes() == mv.data.tobytes()
        assert zl.data.tobytes() == ml.data.tobytes()

    def test_order_independence(self):
        blk = block(seed=5)
        v, l = rand(4, 6), rand(3, 6, seed=1)
        zv, _ = blk(v, l)
        only, none = blk(v, l, visual_only=True)
        assert none is None
        assert zv.data.tobytes() == only.data.tobytes()

    def test_zero_output_projection(self):
        blk = block(seed=6)
        for s in (blk.visual, blk.linguistic):
            s.preproc.mixer.out_proj.zero_()
            s.mixer.out_proj.zero_()
        v, l = rand(4, 6), rand(3, 6, seed=1)
        zv, zl = cmm_forward(ModalityStream(v, "visual"), ModalityStream(l, "linguistic"), blk)
        for z, x, s in ((zv, v, blk.visual), (zl, l, blk.linguistic)):
            ln = s.mixer.norm
            expect = layer_norm(layer_norm(x, ln.gain, ln.bias), s.norm_out.gain, s.norm_out.bias)
            assert z.data.tobytes() == expect.data.tobytes()

    def test_cross_isolation(self):
        blk = block(l=0, L=3, seed=7)
        v = rand(4, 6)
        outs = {blk(v, rand(T, 6, seed=T))[0].data.tobytes() for T in (1, 3, 9)}
        assert len(outs) == 1

    def test_other_stream_matters_when_alpha_positive(self):
        blk = block(l=2, L=2, seed=7)
        v = rand(4, 6)
        assert not np.array_equal(blk(v, rand(3, 6, seed=1))[0].data, blk(v, rand(3, 6, seed=2))[0].data)

    @given(st.integers(1, 9), st.integers(0, 9))
    def test_length_preserved(self, Tv, Tl):
        blk = block(seed=8)
        zv, zl = blk(rand(Tv, 6), Tensor(np.random.default_rng(Tl).standard_normal((Tl, 6))))
        assert zv.shape == (Tv, 6) and zl.shape == (Tl, 6)

    def test_width_mismatch(self):
        with pytest.raises(ConfigurationError):
            block()(rand(3, 6), rand(3, 5))

    def test_gradient(self):
        blk = block(l=1, L=2, seed=9)
        v, l = rand(4, 6), rand(3, 6, seed=1)
        Rv, Rl = projector((4, 6)), projector((3, 6), seed=5)

        def f():
            zv, zl = blk(v, l)
            return (zv * Rv).sum() + (zl * Rl).sum()

        assert max_rel_error(f, [v, l] + blk.parameters(), samples=12) < 1e-4

    def test_bypass(self):
        byp = CMMBypass(TINY)
        v, l = rand(4, 6), rand(3, 6, seed=1)
        zv, zl = byp(v, l)
        np.testing.assert_allclose(zv.data.mean(axis=1), 0, atol=1e-12)
        assert byp(v, l, visual_only=True)[1] is None
        assert byp.num_parameters() == 4 * 6


class TestFlops:
    cfg = MambaConfig(d_model=64)

    @given(st.integers(1, 5000), st.integers(0, 5000))
    def test_doubling_is_exact(self, Tv, Tl):
        assert flops_cmm(2 * Tv, 2 * Tl, self.cfg) == 2 * flops_cmm(Tv, Tl, self.cfg)

    def test_empty_other_stream(self):
        blk = block(self.cfg)
        assert blk.linguistic.flops(0, 100, blk.bc) == 0
        assert flops_cmm(100, 0, self.cfg) == blk.visual.flops(100, 0, blk.bc)

    def test_linear_in_total_length(self):
        assert flops_cmm(300, 100, self.cfg) + flops_cmm(100, 300, self.cfg) == 2 * flops_cmm(200, 200, self.cfg)

    @pytest.mark.xfail(strict=True, reason="per stream, attention costs only ~1.23x the CMM count at T=4096, D_model=256")
    def test_tenfold_advantage_at_4096(self):
        cfg = MambaConfig(d_model=256)
        ratio = flops_attention(4096, 256) / (flops_cmm(4096, 4096, cfg) / 2)
        assert ratio >= 10

    def test_advantage_grows_with_length(self):
        cfg = MambaConfig(d_model=256)
        ratios = [flops_attention(T, 256) / (flops_cmm(T, T, cfg) / 2) for T in (1024, 4096, 16384)]
        assert ratios[0] < ratios[1] < ratios[2]
        assert ratios[1] > 1
