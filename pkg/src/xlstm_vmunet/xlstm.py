"""sLSTM (scalar memory with normalizer state) and mLSTM (matrix memory) blocks.

Both blocks map a batch of sequences ``(B, L, D)`` to the same shape: the
cell runs step by step, its hidden states go through a gated up/down
projection, and the input is added back.

Gates are sigmoid throughout; there is no exponential gating or stabilizer
state. mLSTM gates see only the current input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .params import constant, kaiming_uniform, static
from .tensor import Tensor

N_CLAMP = 1e-8


def up_dim(dim: int, factor: float = 4 / 3) -> int:
    return math.ceil(factor * dim - 1e-9)


def block_diagonal_mask(dim: int, heads: int) -> np.ndarray:
    if heads < 1 or dim % heads:
        raise ConfigurationError(f"width {dim} is not divisible into {heads} heads")
    size = dim // heads
    return np.kron(np.eye(heads), np.ones((size, size)))


def _project_out(h, W_up_left, W_up_right, W_down) -> Tensor:
    """``W_down((W_up_left h) * GELU(W_up_right h))``."""
    return T.matmul(T.mul(T.matmul(h, W_up_left), T.gelu(T.matmul(h, W_up_right))), W_down)


def _check_sequence(x: Tensor, dim: int, name: str) -> None:
    if x.ndim != 3 or x.shape[-1] != dim:
        raise ContractError(f"{name}: expected (B, L, {dim}) input, got {x.shape}")


# --- sLSTM -------------------------------------------------------------------

@dataclass
class SLSTMState:
    c: Tensor
    n: Tensor
    h: Tensor

    @classmethod
    def zeros(cls, batch: int, dim: int) -> "SLSTMState":
        z = T.as_tensor(np.zeros((batch, dim)))
        return cls(z, z, z)


@dataclass
class SLSTMParams:
    W_z: Tensor
    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    R_z: Tensor
    R_i: Tensor
    R_f: Tensor
    R_o: Tensor
    b_z: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    W_up_left: Tensor
    W_up_right: Tensor
    W_down: Tensor
    heads: int = static(4)

    @classmethod
    def init(cls, dim: int, seed: int, prefix: str, heads: int = 4,
             factor: float = 4 / 3) -> "SLSTMParams":
        mask = block_diagonal_mask(dim, heads)
        up = up_dim(dim, factor)
        ku = lambda f, shape, fan: kaiming_uniform(seed, f"{prefix}.{f}", shape, fan)
        rec = {f"R_{g}": Tensor(ku(f"R_{g}", (dim, dim), dim // heads).data * mask, requires_grad=True)
               for g in "zifo"}
        return cls(
            **{f"W_{g}": ku(f"W_{g}", (dim, dim), dim) for g in "zifo"}, **rec,
            **{f"b_{g}": constant(0.0, dim) for g in "zifo"},
            W_up_left=ku("W_up_left", (dim, up), dim), W_up_right=ku("W_up_right", (dim, up), dim),
            W_down=ku("W_down", (up, dim), up), heads=heads,
        )

    @property
    def dim(self) -> int:
        return self.W_z.shape[0]

    def recurrent(self, gate: str) -> Tensor:
        """Block-diagonal view of ``R_gate``; off-block entries never receive gradient."""
        return T.mul(getattr(self, f"R_{gate}"), block_diagonal_mask(self.dim, self.heads))


def slstm_update(s: SLSTMState, z, i, f, o) -> SLSTMState:
    """``c = f c + i z``, ``n = f n + i``, ``h = o c / n`` (n clamped at 1e-8)."""
    c = T.add(T.mul(f, s.c), T.mul(i, z))
    n = T.add(T.mul(f, s.n), i)
    h = T.div(T.mul(o, c), T.maximum(n, N_CLAMP))
    return SLSTMState(c, n, h)


def _slstm_cell(p: SLSTMParams, s: SLSTMState, xz, xi, xf, xo,
                masks: dict[str, Tensor]) -> SLSTMState:
    def pre(xg, g):
        return T.add(xg, T.matmul(s.h, masks[g]))
    z = T.tanh(pre(xz, "z"))
    i = T.sigmoid(pre(xi, "i"))
    f = T.sigmoid(pre(xf, "f"))
    o = T.sigmoid(pre(xo, "o"))
    return slstm_update(s, z, i, f, o)


def slstm_step(p: SLSTMParams, s: SLSTMState, x_t) -> SLSTMState:
    """One sLSTM step for ``x_t`` of shape (B, D)."""
    x_t = T.as_tensor(x_t)
    if x_t.shape[-1] != p.dim or s.h.shape[-1] != p.dim:
        raise ContractError(f"slstm_step: state/input width must be {p.dim}")
    xg = {g: T.add(T.matmul(x_t, getattr(p, f"W_{g}")), getattr(p, f"b_{g}")) for g in "zifo"}
    masks = {g: p.recurrent(g) for g in "zifo"}
    return _slstm_cell(p, s, xg["z"], xg["i"], xg["f"], xg["o"], masks)


def slstm_hidden(p: SLSTMParams, x) -> Tensor:
    """Hidden states ``h_1..h_L`` (B, L, D) of the sLSTM cell over ``x``."""
    x = T.as_tensor(x)
    _check_sequence(x, p.dim, "slstm")
    b, length, d = x.shape
    xg = {g: T.add(T.matmul(x, getattr(p, f"W_{g}")), getattr(p, f"b_{g}")) for g in "zifo"}
    masks = {g: p.recurrent(g) for g in "zifo"}
    s = SLSTMState.zeros(b, d)
    hs = []
    for t in range(length):
        s = _slstm_cell(p, s, *(xg[g][:, t] for g in "zifo"), masks)
        hs.append(s.h)
    return T.stack(hs, axis=1)


def slstm_block(p: SLSTMParams, x) -> Tensor:
    """``F_t = W_down(W_up_left h_t * GELU(W_up_right h_t)) + x_t``."""
    x = T.as_tensor(x)
    h = slstm_hidden(p, x)
    return T.add(_project_out(h, p.W_up_left, p.W_up_right, p.W_down), x)


# --- mLSTM -------------------------------------------------------------------

@dataclass
class MLSTMState:
    C: Tensor   # B×d×d
    n: Tensor   # B×d
    h: Tensor   # B×d

    @classmethod
    def zeros(cls, batch: int, dim: int) -> "MLSTMState":
        return cls(T.as_tensor(np.zeros((batch, dim, dim))), T.as_tensor(np.zeros((batch, dim))),
                   T.as_tensor(np.zeros((batch, dim))))


@dataclass
class MLSTMParams:
    """Query/key/value maps D→d, scalar input/forget gates, vector output gate."""

    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    b_q: Tensor
    b_k: Tensor
    b_v: Tensor
    W_i: Tensor     # D×1
    W_f: Tensor     # D×1
    W_o: Tensor     # D×d
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    W_up_left: Tensor
    W_up_right: Tensor
    W_down: Tensor

    @classmethod
    def init(cls, dim: int, seed: int, prefix: str, head_dim: int | None = None,
             factor: float = 4 / 3) -> "MLSTMParams":
        d = head_dim or dim
        up = up_dim(d, factor)
        ku = lambda f, shape, fan: kaiming_uniform(seed, f"{prefix}.{f}", shape, fan)
        return cls(
            W_q=ku("W_q", (dim, d), dim), W_k=ku("W_k", (dim, d), dim), W_v=ku("W_v", (dim, d), dim),
            b_q=constant(0.0, d), b_k=constant(0.0, d), b_v=constant(0.0, d),
            W_i=ku("W_i", (dim, 1), dim), W_f=ku("W_f", (dim, 1), dim), W_o=ku("W_o", (dim, d), dim),
            b_i=constant(0.0, 1), b_f=constant(0.0, 1), b_o=constant(0.0, d),
            W_up_left=ku("W_up_left", (d, up), d), W_up_right=ku("W_up_right", (d, up), d),
            W_down=ku("W_down", (up, dim), up),
        )

    @property
    def dim(self) -> int:
        return self.W_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.W_q.shape[1]


def mlstm_update(s: MLSTMState, q, k, v, i, f, o) -> MLSTMState:
    """``C = f C + i v k^T``, ``n = f n + i k``, ``h = o * C q / max(|n^T q|, 1)``.

    ``i`` and ``f`` are (B, 1); everything else is (B, d) except ``C``.
    """
    fC = T.reshape(f, f.shape + (1,))
    iC = T.reshape(i, i.shape + (1,))
    outer = T.mul(T.reshape(v, v.shape + (1,)), T.reshape(k, k.shape[:1] + (1,) + k.shape[1:]))
    C = T.add(T.mul(fC, s.C), T.mul(iC, outer))
    n = T.add(T.mul(f, s.n), T.mul(i, k))
    denom = T.maximum(T.abs_(T.sum_(T.mul(n, q), axis=-1, keepdims=True)), 1.0)
    h = T.mul(o, T.div(T.einsum("bij,bj->bi", C, q), denom))
    return MLSTMState(C, n, h)


def _mlstm_inputs(p: MLSTMParams, x):
    q = T.add(T.matmul(x, p.W_q), p.b_q)
    k = T.add(T.mul(T.matmul(x, p.W_k), 1.0 / math.sqrt(p.head_dim)), p.b_k)
    v = T.add(T.matmul(x, p.W_v), p.b_v)
    i = T.sigmoid(T.add(T.matmul(x, p.W_i), p.b_i))
    f = T.sigmoid(T.add(T.matmul(x, p.W_f), p.b_f))
    o = T.sigmoid(T.add(T.matmul(x, p.W_o), p.b_o))
    return q, k, v, i, f, o


def mlstm_step(p: MLSTMParams, s: MLSTMState, x_t) -> MLSTMState:
    """One mLSTM step for ``x_t`` of shape (B, D)."""
    x_t = T.as_tensor(x_t)
    if x_t.shape[-1] != p.dim or s.n.shape[-1] != p.head_dim:
        raise ContractError(f"mlstm_step: input width {p.dim}, state width {p.head_dim} expected")
    return mlstm_update(s, *_mlstm_inputs(p, x_t))


def mlstm_hidden(p: MLSTMParams, x) -> Tensor:
    x = T.as_tensor(x)
    _check_sequence(x, p.dim, "mlstm")
    b, length, _ = x.shape
    q, k, v, i, f, o = _mlstm_inputs(p, x)
    s = MLSTMState.zeros(b, p.head_dim)
    hs = []
    for t in range(length):
        s = mlstm_update(s, q[:, t], k[:, t], v[:, t], i[:, t], f[:, t], o[:, t])
        hs.append(s.h)
    return T.stack(hs, axis=1)


def mlstm_block(p: MLSTMParams, x) -> Tensor:
    x = T.as_tensor(x)
    h = mlstm_hidden(p, x)
    return T.add(_project_out(h, p.W_up_left, p.W_up_right, p.W_down), x)
