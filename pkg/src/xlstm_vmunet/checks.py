"""Finite-difference suite over every differentiable op and the toy model."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .gradcheck import GradCheckReport, check_gradients
from .network import ModelConfig, forward, init_weights, lstm_pass, patch_conv, patch_expand, Conv, XLSTMGateParams
from .ssm import linear_recurrence, selective_scan_core
from .tensor import Tensor
from .training import bce_dice_loss
from .vss import VSSBlockParams, vss_block
from .xlstm import MLSTMParams, SLSTMParams, mlstm_block, slstm_block

TOY_MODEL = ModelConfig(height=32, width=32, in_channels=1, widths=(8, 16), depths=(1, 1), state_dim=4)


def _away_from_kinks(rng, shape, margin=0.05):
    """Normal draws pushed at least ``margin`` away from 0 (for abs, relu, clip at 0)."""
    v = rng.normal(size=shape)
    return np.where(v >= 0, v + margin, v - margin)


def _cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    leaf = lambda *shape, scale=1.0: Tensor(rng.normal(size=shape) * scale, requires_grad=True)
    kinked = lambda *shape: Tensor(_away_from_kinks(rng, shape), requires_grad=True)
    pos = lambda *shape: Tensor(rng.uniform(0.5, 2.0, shape), requires_grad=True)
    a, b, c = leaf(3, 4), leaf(4), leaf(3, 1)
    probes: dict[tuple, np.ndarray] = {}

    def probe(shape):
        # fixed per shape so repeated loss evaluations see the same weighting
        if shape not in probes:
            probes[shape] = rng.normal(size=shape)
        return probes[shape]

    cases = {}

    def unary(name, fn, x):
        w = probe(x.shape)
        cases[name] = (lambda: T.sum_(T.mul(fn(x), w)), [x])

    cases["add/sub/mul broadcast"] = (lambda: T.sum_(T.mul(T.sub(T.add(a, b), c), T.mul(a, c))), [a, b, c])
    d = pos(3, 4)
    cases["div"] = (lambda: T.sum_(T.div(a, d)), [a, d])
    unary("exp", T.exp, leaf(5))
    unary("log", T.log, pos(5))
    unary("expm1", T.expm1, leaf(5))
    unary("phi1", T.phi1, Tensor(np.array([-3.0, -0.5, -1e-6, 1e-7, 0.4, 2.0]), requires_grad=True))
    unary("abs", T.abs_, kinked(6))
    unary("maximum", lambda x: T.maximum(x, 0.0), kinked(6))
    unary("clip", lambda x: T.clip(x, -0.5, 0.5), Tensor(np.array([-1.0, -0.3, 0.1, 0.45, 0.9]), requires_grad=True))
    for name, fn in [("sigmoid", T.sigmoid), ("tanh", T.tanh), ("silu", T.silu), ("gelu", T.gelu),
                     ("softplus", T.softplus)]:
        unary(name, fn, leaf(7, scale=2.0))
    unary("relu", T.relu, kinked(7))
    e = leaf(2, 3, 4)
    w234 = probe((3, 2))
    cases["sum/mean/reshape/transpose"] = (
        lambda: T.sum_(T.mul(T.transpose(T.reshape(T.mean(e, axis=2), (2, 3)), (1, 0)), w234))
        + T.mean(T.mul(e, e)), [e])
    w233 = probe((2, 3, 3))
    cases["take/getitem"] = (lambda: T.sum_(T.mul(T.take(e, np.array([2, 0, 2]), axis=2), w233))
                             + T.sum_(e[:, 1:, ::2]), [e])
    f, w54, w324 = leaf(2, 4), probe((5, 4)), probe((3, 2, 4))
    cases["concat/stack"] = (lambda: T.sum_(T.mul(T.concat([a, f], axis=0), w54))
                             + T.sum_(T.mul(T.stack([a, a], axis=1), w324)), [a, f])
    m1, m2, w235 = leaf(2, 3, 4), leaf(4, 5), probe((2, 3, 5))
    cases["matmul"] = (lambda: T.sum_(T.mul(T.matmul(m1, m2), w235)), [m1, m2])
    cases["einsum"] = (lambda: T.sum_(T.mul(T.einsum("bij,jk->bik", m1, m2), w235)), [m1, m2])
    x = leaf(2, 4, 6, 6)
    k1, k2, bias = leaf(6, 2, 3, 3), leaf(4, 4, 2, 2), leaf(6)
    cases["conv2d grouped/padded"] = (
        lambda: T.sum_(T.mul(T.conv2d(x, k1, bias, stride=1, padding=1, groups=2), probe((2, 6, 6, 6)))),
        [x, k1, bias])
    cases["conv2d strided"] = (lambda: T.sum_(T.mul(T.conv2d(x, k2, stride=2), probe((2, 4, 3, 3)))), [x, k2])
    kt = leaf(4, 3, 2, 2)
    cases["conv_transpose2d"] = (lambda: T.sum_(T.mul(T.conv_transpose2d(x, kt, stride=2), probe((2, 3, 12, 12)))),
                                 [x, kt])
    distinct = Tensor(rng.permutation(2 * 4 * 6 * 6).reshape(2, 4, 6, 6) * 0.1, requires_grad=True)
    cases["max_pool2d"] = (lambda: T.sum_(T.mul(T.max_pool2d(distinct, 2), probe((2, 4, 3, 3)))), [distinct])
    cases["avg_pool2d/upsample"] = (
        lambda: T.sum_(T.mul(T.upsample_nearest2d(T.avg_pool2d(x, 2), 2), probe((2, 4, 6, 6)))), [x])
    ln_x, g, be = leaf(3, 5), leaf(5), leaf(5)
    cases["layernorm"] = (lambda: T.sum_(T.mul(T.layernorm(ln_x, g, be), probe((3, 5)))), [ln_x, g, be])
    ra, rb = Tensor(rng.uniform(0.2, 0.95, (2, 6, 3)), requires_grad=True), leaf(2, 6, 3)
    cases["linear_recurrence"] = (lambda: T.sum_(T.mul(linear_recurrence(ra, rb), probe((2, 6, 3)))), [ra, rb])
    u, dl = leaf(2, 5, 3), Tensor(rng.uniform(0.05, 0.8, (2, 5, 3)), requires_grad=True)
    A = Tensor(-rng.uniform(0.3, 2.0, (3, 4)), requires_grad=True)
    Bm, Cm = leaf(2, 5, 4), leaf(2, 5, 4)
    for disc in ("zoh", "euler"):
        cases[f"selective_scan ({disc})"] = (
            lambda disc=disc: T.sum_(T.mul(selective_scan_core(u, dl, A, Bm, Cm, disc), probe((2, 5, 3)))),
            [u, dl, A, Bm, Cm])
    # 4 channels: layernorm over 2 is near-singular when the pair nearly ties
    vp = VSSBlockParams.init(4, 3, seed=1, prefix="v")
    vx = leaf(1, 3, 4, 4)
    vw = probe((1, 3, 4, 4))
    cases["vss_block (SS2D)"] = (lambda: T.sum_(T.mul(vss_block(vx, vp), vw)),
                                 [vx] + [getattr(vp, k) for k in vars(vp)])
    sp, mp = SLSTMParams.init(4, 2, "s", heads=2), MLSTMParams.init(4, 3, "m")
    sx = leaf(2, 4, 4)
    sw = probe((2, 4, 4))
    cases["slstm_block"] = (lambda: T.sum_(T.mul(slstm_block(sp, sx), sw)),
                            [sx] + [getattr(sp, k) for k in vars(sp) if k != "heads"])
    cases["mlstm_block"] = (lambda: T.sum_(T.mul(mlstm_block(mp, sx), sw)), [sx] + list(vars(mp).values()))
    lp = XLSTMGateParams.init(4, 4, "l")
    cases["lstm_pass"] = (lambda: T.sum_(T.mul(lstm_pass(lp, sx), sw)), [sx] + list(vars(lp).values()))
    pc, pe = Conv(leaf(3, 2, 2, 2), leaf(3)), Conv(leaf(3, 2, 2, 2), leaf(2))
    px = leaf(1, 4, 4, 2)
    cases["patch_conv/patch_expand"] = (
        lambda: T.sum_(T.mul(patch_expand(patch_conv(px, pc, 2), pe, 2), probe((1, 4, 4, 2)))),
        [px, pc.kernel, pc.bias, pe.kernel, pe.bias])
    z = leaf(2, 1, 3, 3)
    y = (rng.random((2, 1, 3, 3)) < 0.5).astype(float)
    cases["bce_dice_loss"] = (lambda: bce_dice_loss(z, y), [z])
    return cases


def gradient_suite(seed: int = 0, model_samples: int = 120,
                   config: ModelConfig = TOY_MODEL) -> list[tuple[str, GradCheckReport]]:
    """(name, report) for each op case, then the full model on ``config``."""
    rng = np.random.default_rng(seed)
    out = [(name, check_gradients(fn, params, rng=rng, samples=100))
           for name, (fn, params) in _cases(rng).items()]
    # own stream, so editing an op case does not move the model draw
    rng = np.random.default_rng([seed, 1])
    weights = init_weights(config, seed)
    x = Tensor(rng.uniform(size=(1, config.in_channels, config.height, config.width)))
    probe = rng.normal(size=(1, 1, config.height, config.width))
    params = [p for p in weights.values() if p.requires_grad]
    report = check_gradients(lambda: T.sum_(T.mul(forward(x, config, weights), probe)), params,
                             samples=model_samples, rng=rng)
    out.append(("full model " + "x".join(map(str, config.widths)), report))
    return out
