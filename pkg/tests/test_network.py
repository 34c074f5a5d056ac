import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xlstm_vmunet import tensor as T
from xlstm_vmunet.errors import ConfigurationError, ContractError
from xlstm_vmunet.gradcheck import check_gradients
from xlstm_vmunet.network import (
    Conv, FusionParams, ModelConfig, XLSTMGateParams, ablation_configs, check_weights,
    forward, from_sequence, fuse, init_weights, lstm_pass, patch_conv, patch_expand,
    to_sequence, vssm_decode, vssm_encode, xlstm_bottleneck,
)
from xlstm_vmunet.params import bind
from xlstm_vmunet.tensor import Tape, Tensor, backward
from xlstm_vmunet.xlstm import MLSTMParams, SLSTMParams, mlstm_block, slstm_block

TOY = ModelConfig(height=32, width=32, in_channels=1, widths=(8, 16), depths=(1, 1), state_dim=4)


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def lstm_oracle(p: XLSTMGateParams, seq):
    """Unvectorized LSTM over a list of vectors."""
    get = lambda name: getattr(p, name).data
    d = p.dim
    c, h = [0.0] * d, [0.0] * d
    out = []
    for x in seq:
        pre = {}
        for g in "ifog":
            W, U, b = get(f"W_{g}"), get(f"U_{g}"), get(f"b_{g}")
            pre[g] = [sum(x[k] * W[k, j] for k in range(d)) + sum(h[k] * U[k, j] for k in range(d)) + b[j]
                      for j in range(d)]
        c = [sig(pre["f"][j]) * c[j] + sig(pre["i"][j]) * math.tanh(pre["g"][j]) for j in range(d)]
        h = [sig(pre["o"][j]) * math.tanh(c[j]) for j in range(d)]
        out.append(h)
    return np.array(out)


def zero_all(weights):
    return {k: Tensor(np.zeros(v.shape)) for k, v in weights.items()}


class TestConfig:
    def test_defaults(self):
        c = ModelConfig()
        assert c.widths == (32, 64, 128, 256) and c.depths == (2, 2, 2, 2)
        assert c.bottleneck_shape == (8, 8, 256)

    @pytest.mark.parametrize("size", [48, 100, 250])
    def test_indivisible_resolution(self, size):
        with pytest.raises(ConfigurationError):
            ModelConfig(height=size, width=256)

    def test_bad_settings(self):
        with pytest.raises(ConfigurationError):
            ModelConfig.desk(fusion="concat")
        with pytest.raises(ConfigurationError):
            ModelConfig.desk(widths=(16, 32), depths=(1,))
        with pytest.raises(ConfigurationError):
            ModelConfig.desk(widths=(16, 32, 64, 126))  # 126 not divisible into 4 heads

    def test_ablation_lattice(self):
        variants = ablation_configs(ModelConfig.desk())
        assert [(v.use_slstm, v.use_mlstm) for v in variants.values()] == [
            (False, False), (True, False), (False, True), (True, True)]
        assert len({v.digest() for v in variants.values()}) == 4

    def test_weights_shared_across_variants(self):
        w1 = init_weights(TOY.replace(use_slstm=False, use_mlstm=False), seed=3)
        w4 = init_weights(TOY, seed=3)
        assert set(w1) < set(w4)
        assert all(np.array_equal(w1[k].data, w4[k].data) for k in w1)

    def test_check_weights(self):
        w = init_weights(TOY, 0)
        check_weights(TOY, w)
        with pytest.raises(ConfigurationError):
            check_weights(TOY.replace(use_mlstm=False), w)
        w["head.bias"] = Tensor(np.zeros(2))
        with pytest.raises(ConfigurationError):
            check_weights(TOY, w)


class TestPatchConvolutions:
    def test_patch_conv_matches_strided_conv2d(self):
        rng = np.random.default_rng(0)
        conv = Conv(Tensor(rng.normal(size=(5, 3, 4, 4))), Tensor(rng.normal(size=5)))
        x = rng.normal(size=(2, 8, 12, 3))
        got = patch_conv(x, conv, 4).data
        ref = T.conv2d(x.transpose(0, 3, 1, 2), conv.kernel, conv.bias, stride=4).data.transpose(0, 2, 3, 1)
        assert np.max(np.abs(got - ref)) <= 1e-12

    def test_patch_expand_matches_conv_transpose2d(self):
        rng = np.random.default_rng(1)
        conv = Conv(Tensor(rng.normal(size=(3, 2, 2, 2))), Tensor(rng.normal(size=2)))
        x = rng.normal(size=(2, 3, 5, 3))
        got = patch_expand(x, conv, 2).data
        ref = T.conv_transpose2d(x.transpose(0, 3, 1, 2), conv.kernel, conv.bias, stride=2).data
        assert np.max(np.abs(got - ref.transpose(0, 2, 3, 1))) <= 1e-12


class TestEncoder:
    def test_default_stage_shapes(self):
        c = ModelConfig()
        x = np.random.default_rng(2).uniform(size=(3, 256, 256))
        skips, bottleneck = vssm_encode(x, c, init_weights(c, 0))
        assert [s.shape[1:] for s in skips] == [(64, 64, 32), (32, 32, 64), (16, 16, 128)]
        assert bottleneck.shape[1:] == (8, 8, 256)

    def test_toy_stage_shapes_and_finite(self):
        c = ModelConfig(height=64, width=64, in_channels=1, widths=(8, 16), depths=(1, 1), state_dim=4)
        x = np.random.default_rng(3).uniform(size=(2, 1, 64, 64))
        skips, bottleneck = vssm_encode(x, c, init_weights(c, 1))
        assert [s.shape for s in skips] == [(2, 16, 16, 8)] and bottleneck.shape == (2, 8, 8, 16)
        assert all(np.all(np.isfinite(t.data)) for t in skips + [bottleneck])

    def test_resolution_mismatch_names_both(self):
        with pytest.raises(ConfigurationError, match="32×32.*64×64|64×64.*32×32"):
            forward(np.zeros((1, 64, 64)), TOY, init_weights(TOY, 0))


class TestSequence:
    def test_row_major_order(self):
        f = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
        assert to_sequence(f).data[:, 0].tolist() == [1.0, 2.0, 3.0, 4.0]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
    def test_roundtrip_bitwise(self, h, w, seed):
        f = np.random.default_rng(seed).normal(size=(2, h, w, 3))
        assert np.array_equal(from_sequence(to_sequence(f), h, w).data, f)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            from_sequence(np.zeros((5, 2)), 2, 3)

    def test_zero_projection_blocks_leave_map_unchanged(self):
        f = np.random.default_rng(4).normal(size=(1, 3, 4, 8))
        s = SLSTMParams.init(8, 0, "s", heads=2)
        m = MLSTMParams.init(8, 0, "m")
        for p in (s, m):
            for name in ("W_up_left", "W_up_right", "W_down"):
                setattr(p, name, Tensor(np.zeros(getattr(p, name).shape)))
        out = from_sequence(mlstm_block(m, slstm_block(s, to_sequence(f))), 3, 4)
        assert np.array_equal(out.data, f)


class TestBottleneck:
    def test_closed_output_gate(self):
        c = TOY.replace(use_slstm=False, use_mlstm=False)
        w = init_weights(c, 0)
        for g in "ifog":
            w[f"lstm.W_{g}"] = Tensor(np.zeros((16, 16)))
            w[f"lstm.U_{g}"] = Tensor(np.zeros((16, 16)))
        w["lstm.b_o"] = Tensor(np.full(16, -40.0))
        w["lstm.b_g"] = Tensor(np.zeros(16))
        f = np.random.default_rng(5).normal(size=(1, 4, 4, 16))
        assert np.max(np.abs(xlstm_bottleneck(f, c, w).data)) <= 1e-15

    def test_single_pixel_is_one_step(self):
        p = XLSTMGateParams.init(6, 0, "lstm")
        x = np.random.default_rng(6).normal(size=6)
        v = {g: x @ getattr(p, f"W_{g}").data for g in "ifog"}
        s = lambda z: 1 / (1 + np.exp(-z))
        h = s(v["o"]) * np.tanh(s(v["i"]) * np.tanh(v["g"]))
        got = lstm_pass(p, x.reshape(1, 1, 6)).data[0, 0]
        np.testing.assert_allclose(got, h, rtol=0, atol=1e-15)

    def test_four_by_four_matches_scalar_loop(self):
        c = TOY.replace(use_slstm=False, use_mlstm=False)
        w = init_weights(c, 7)
        for g in "ifog":
            w[f"lstm.b_{g}"] = Tensor(np.random.default_rng(ord(g)).normal(size=16))
        f = np.random.default_rng(8).normal(size=(1, 4, 4, 16))
        got = xlstm_bottleneck(f, c, w).data[0]
        oracle = lstm_oracle(bind(XLSTMGateParams, w, "lstm"), f[0].reshape(16, 16).tolist())
        assert np.max(np.abs(got.reshape(16, 16) - oracle)) <= 1e-12

    def test_stack_order(self):
        w = init_weights(TOY, 9)
        f = np.random.default_rng(10).normal(size=(1, 4, 4, 16))
        seq = lstm_pass(bind(XLSTMGateParams, w, "lstm"), to_sequence(f))
        seq = slstm_block(bind(SLSTMParams, w, "slstm", heads=TOY.slstm_heads), seq)
        seq = mlstm_block(bind(MLSTMParams, w, "mlstm"), seq)
        assert np.array_equal(xlstm_bottleneck(f, TOY, w).data, from_sequence(seq, 4, 4).data)


class TestFusion:
    def test_identities(self):
        rng = np.random.default_rng(11)
        F, H = rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(2, 3, 3, 4))
        assert np.array_equal(fuse(F, H, FusionParams.init(alpha=1.0, beta=0.0)).data, F)
        assert np.array_equal(fuse(F, H, FusionParams.init(alpha=0.0, beta=1.0)).data, H)
        assert np.array_equal(fuse(F, F, FusionParams.init()).data, F)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            fuse(np.zeros((1, 2, 2, 4)), np.zeros((1, 2, 2, 3)), FusionParams.init())

    def test_fixed_mode_freezes_weights(self):
        w = init_weights(TOY.replace(fusion="fixed"), 0)
        assert not w["fusion.alpha"].requires_grad and w["fusion.alpha"].item() == 0.5

    def test_fusion_gradients_nonzero_and_correct(self):
        w = init_weights(TOY, 12)
        x = np.random.default_rng(13).uniform(size=(2, 1, 32, 32))
        target = np.random.default_rng(14).normal(size=(2, 1, 32, 32))
        loss = lambda: ((forward(x, TOY, w) - target) * (forward(x, TOY, w) - target)).mean()
        with Tape() as tape:
            value = loss()
        ga, gb = backward(value, tape, [w["fusion.alpha"], w["fusion.beta"]])
        assert ga != 0.0 and gb != 0.0
        rep = check_gradients(loss, [w["fusion.alpha"], w["fusion.beta"]])
        assert rep.passed(1e-4), rep


class TestDecoder:
    def test_zero_weights_give_bias_map(self):
        w = zero_all(init_weights(TOY, 0))
        w["head.bias"] = Tensor(np.array([-2.5]))
        out = forward(np.random.default_rng(15).uniform(size=(1, 32, 32)), TOY, w).data
        assert out.shape == (1, 32, 32) and np.all(out == -2.5)

    def test_skip_is_added_when_upsampling_is_zero(self):
        w = init_weights(TOY, 16)
        for k in list(w):
            if k.startswith(("up0.", "dec0.")):
                w[k] = Tensor(np.zeros(w[k].shape))
        rng = np.random.default_rng(17)
        skip, deep = rng.normal(size=(1, 8, 8, 8)), rng.normal(size=(1, 4, 4, 16))
        got = vssm_decode(deep, [Tensor(skip)], TOY, w).data
        expected = patch_expand(skip, bind(Conv, w, "head"), 4).data.transpose(0, 3, 1, 2)
        assert np.array_equal(got, expected)

    def test_skip_count(self):
        with pytest.raises(ContractError):
            vssm_decode(np.zeros((1, 4, 4, 16)), [], TOY, init_weights(TOY, 0))


class TestForward:
    def test_default_output_shape(self):
        c = ModelConfig(depths=(1, 1, 1, 1))
        out = forward(np.random.default_rng(18).uniform(size=(3, 256, 256)), c, init_weights(c, 0))
        assert out.shape == (1, 256, 256)

    def test_desk_forward_finite_and_deterministic(self):
        c = ModelConfig.desk()
        w = init_weights(c, 19)
        x = np.random.default_rng(20).uniform(size=(2, 1, 64, 64))
        a, b = forward(x, c, w).data, forward(x, c, w).data
        assert a.shape == (2, 1, 64, 64) and np.all(np.isfinite(a)) and np.array_equal(a, b)

    def test_plain_variant_is_lstm_only_composition(self):
        c = TOY.replace(use_slstm=False, use_mlstm=False)
        w = init_weights(c, 21)
        x = np.random.default_rng(22).uniform(size=(1, 1, 32, 32))
        skips, f = vssm_encode(x, c, w)
        h = from_sequence(lstm_pass(bind(XLSTMGateParams, w, "lstm"), to_sequence(f)), 4, 4)
        manual = vssm_decode(fuse(f, h, bind(FusionParams, w, "fusion")), skips, c, w)
        assert np.array_equal(forward(x, c, w).data, manual.data)

    @pytest.mark.parametrize("variant", [1, 2, 3, 4])
    def test_toy_gradcheck_over_ablation_lattice(self, variant):
        c = ablation_configs(TOY)[variant]
        w = init_weights(c, 23)
        rng = np.random.default_rng(24)
        x = Tensor(rng.uniform(size=(1, 1, 32, 32)))
        probe = rng.normal(size=(1, 1, 32, 32))
        rep = check_gradients(lambda: (forward(x, c, w) * probe).sum(), list(w.values()),
                              samples=110, rng=np.random.default_rng(variant))
        assert rep.checked >= 100 and rep.passed(1e-4), rep
