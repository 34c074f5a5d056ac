import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xlstm_vmunet.errors import ContractError
from xlstm_vmunet.gradcheck import check_gradients
from xlstm_vmunet.params import flatten
from xlstm_vmunet.ssm import SelectiveProjections, selective_scan
from xlstm_vmunet.tensor import Tensor
from xlstm_vmunet.vss import (
    VSSBlockParams, direction_orders, scan_expand, scan_merge, ss2d, vss_block,
)


def zeroed(p: VSSBlockParams) -> VSSBlockParams:
    return VSSBlockParams(**{k: Tensor(np.zeros(v.shape)) for k, v in vars(p).items()})


class TestScanExpand:
    def test_enumerated_2x2_orderings(self):
        # a=1, b=2, c=3, d=4 as a 2×2×1 map
        f = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
        seqs = scan_expand(f).data[..., 0]
        np.testing.assert_array_equal(seqs, [[1, 2, 3, 4], [1, 3, 2, 4], [4, 3, 2, 1], [4, 2, 3, 1]])

    def test_single_pixel(self):
        seqs = scan_expand(np.full((1, 1, 3), 7.0)).data
        assert seqs.shape == (4, 1, 3) and np.all(seqs == 7.0)

    def test_each_direction_is_a_permutation(self):
        f = np.random.default_rng(0).normal(size=(3, 4, 2))
        seqs = scan_expand(f).data
        for k in range(4):
            for c in range(2):
                assert sorted(seqs[k, :, c]) == sorted(f[..., c].ravel())

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 17), st.integers(1, 13), st.integers(0, 2**31 - 1))
    def test_inverse_reorder_roundtrip_is_bitwise(self, h, w, seed):
        f = np.random.default_rng(seed).normal(size=(2, h, w, 3))
        seqs = scan_expand(f).data
        for k, order in enumerate(direction_orders(h, w)):
            back = np.empty_like(seqs[k])
            back[:, order] = seqs[k]
            assert np.array_equal(back.reshape(f.shape), f)


class TestScanMerge:
    def test_identity_merge_is_four_x(self):
        f = np.random.default_rng(1).normal(size=(2, 5, 3, 4))
        out = scan_merge(scan_expand(f), 5, 3).data
        assert np.array_equal(out, 4 * f)

    def test_one_direction_zeroed(self):
        f = np.random.default_rng(2).normal(size=(4, 6, 2))
        seqs = scan_expand(f).data.copy()
        seqs[2] = 0.0
        assert np.array_equal(scan_merge(seqs, 4, 6).data, 3 * f)

    def test_permutation_matrix_oracle(self):
        rng = np.random.default_rng(3)
        h, w = 3, 4
        length = h * w
        x = rng.normal(size=(h, w, 1))
        maps = rng.normal(size=(4, length, length))
        seqs = scan_expand(x).data[..., 0]
        processed = np.stack([maps[k] @ seqs[k] for k in range(4)])[..., None]
        got = scan_merge(processed, h, w).data.ravel()
        expected = np.zeros(length)
        for k, order in enumerate(direction_orders(h, w)):
            P = np.eye(length)[order]          # seq = P @ flat
            expected += P.T @ maps[k] @ P @ x.ravel()
        assert np.max(np.abs(got - expected)) <= 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            scan_merge(np.zeros((4, 5, 2)), 2, 3)


class TestVSSBlock:
    def test_zero_weights_pass_residual(self):
        p = zeroed(VSSBlockParams.init(4, 3, seed=0, prefix="b"))
        x = np.random.default_rng(4).normal(size=(2, 5, 5, 4))
        assert np.array_equal(vss_block(x, p).data, x)

    def test_shape_preserved(self):
        p = VSSBlockParams.init(8, 4, seed=1, prefix="b")
        x = np.random.default_rng(5).normal(size=(16, 16, 8))
        out = vss_block(x, p).data
        assert out.shape == (16, 16, 8) and np.all(np.isfinite(out))

    def test_identity_mixer_is_gated_mlp(self):
        p = VSSBlockParams.init(4, 3, seed=2, prefix="b", expand=2)
        x = np.random.default_rng(6).normal(size=(1, 3, 3, 4))
        got = vss_block(x, p, mixer=lambda s: s).data

        def ln(v, g, b):
            mu = v.mean(-1, keepdims=True)
            var = ((v - mu) ** 2).mean(-1, keepdims=True)
            return (v - mu) / np.sqrt(var + 1e-5) * g + b

        def silu(v):
            return v / (1 + np.exp(-v))

        z = ln(x, p.ln_gamma.data, p.ln_beta.data)
        gate = silu(z @ p.W_gate.data)
        s = z @ p.W_in.data
        conv = np.zeros_like(s)
        sp = np.pad(s, ((0, 0), (1, 1), (1, 1), (0, 0)))
        for i in range(3):
            for j in range(3):
                for u in range(3):
                    for v in range(3):
                        conv[0, i, j] += sp[0, i + u, j + v] * p.dw_kernel.data[:, 0, u, v]
        s = ln(silu(conv + p.dw_bias.data), p.post_gamma.data, p.post_beta.data)
        expected = x + (s * gate) @ p.W_out.data
        assert np.max(np.abs(got - expected)) <= 1e-12

    @pytest.mark.parametrize("shared", [False, True])
    def test_ss2d_matches_per_direction_scans(self, shared):
        p = VSSBlockParams.init(3, 2, seed=3, prefix="b", shared_directions=shared)
        assert p.shared_directions == shared
        u = np.random.default_rng(8).normal(size=(2, 3, 4, 3))
        got = ss2d(u, p).data
        expected = np.zeros_like(u)
        flat = u.reshape(2, 12, 3)
        for k, order in enumerate(direction_orders(3, 4)):
            j = 0 if shared else k
            proj = SelectiveProjections(p.W_B[j], p.W_C[j], p.W_delta[j], p.delta_bias[j])
            y = selective_scan(proj, p.A_log, flat[:, order]).data
            back = np.empty_like(y)
            back[:, order] = y
            expected += back.reshape(u.shape)
        assert np.max(np.abs(got - expected)) <= 1e-12

    def test_gradcheck_small_instance(self):
        p = VSSBlockParams.init(2, 3, seed=4, prefix="b")
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(1, 4, 4, 2)), requires_grad=True)
        w = rng.normal(size=(1, 4, 4, 2))
        params = [x] + list(flatten(p, "b").values())
        rep = check_gradients(lambda: (vss_block(x, p) * w).sum(), params, samples=150,
                              rng=np.random.default_rng(0))
        assert rep.passed(1e-4), rep
