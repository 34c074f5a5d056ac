"""SS2D four-direction scanning and the VSS block.

Feature maps are channel-last, ``(..., H, W, C)``. Directional sequences are
stacked on a new leading axis of size 4 in the order row-major,
column-major, reversed row-major, reversed column-major.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractError
from .params import constant, kaiming_uniform, param_rng
from .ssm import a_log_init, delta_bias_init, selective_scan_core
from .tensor import Tensor

N_DIRECTIONS = 4


def direction_orders(h: int, w: int) -> list[np.ndarray]:
    """Index arrays into the row-major flattening, one per scan direction."""
    row = np.arange(h * w)
    col = row.reshape(h, w).T.ravel()
    return [row, col, row[::-1].copy(), col[::-1].copy()]


def scan_expand(f) -> Tensor:
    """``(..., H, W, C)`` -> ``(4, ..., H*W, C)`` directional sequences."""
    f = T.as_tensor(f)
    *lead, h, w, c = f.shape
    flat = T.reshape(f, (*lead, h * w, c))
    idx = np.concatenate(direction_orders(h, w))
    seqs = T.reshape(T.take(flat, idx, axis=-2), (*lead, N_DIRECTIONS, h * w, c))
    nlead = len(lead)
    perm = (nlead,) + tuple(range(nlead)) + (nlead + 1, nlead + 2)
    return T.transpose(seqs, perm)


def scan_merge(seqs, h: int, w: int) -> Tensor:
    """Undo each direction's ordering and sum the four maps."""
    seqs = T.as_tensor(seqs)
    if seqs.shape[0] != N_DIRECTIONS or seqs.shape[-2] != h * w:
        raise ContractError(f"scan_merge: expected (4, ..., {h * w}, C), got {seqs.shape}")
    *lead, length, c = seqs.shape[1:]
    nlead = len(lead)
    perm = tuple(range(1, nlead + 1)) + (0, nlead + 1, nlead + 2)
    joined = T.reshape(T.transpose(seqs, perm), (*lead, N_DIRECTIONS * length, c))
    inverse = [np.argsort(o) + k * length for k, o in enumerate(direction_orders(h, w))]
    maps = T.reshape(T.take(joined, np.concatenate(inverse), axis=-2),
                     (*lead, N_DIRECTIONS, length, c))
    # fixed addend order: direction 0 + 1 + 2 + 3
    total = maps[(Ellipsis, 0, slice(None), slice(None))]
    for k in range(1, N_DIRECTIONS):
        total = total + maps[(Ellipsis, k, slice(None), slice(None))]
    return T.reshape(total, (*lead, h, w, c))


@dataclass
class VSSBlockParams:
    """Weights of one VSS block at width C with inner width E.

    Selective projections carry a leading direction axis K (4, or 1 when
    shared across directions); ``A_log`` is shared by all directions.
    """

    ln_gamma: Tensor        # C
    ln_beta: Tensor         # C
    W_gate: Tensor          # C×E
    W_in: Tensor            # C×E
    dw_kernel: Tensor       # E×1×3×3
    dw_bias: Tensor         # E
    W_B: Tensor             # K×E×N
    W_C: Tensor             # K×E×N
    W_delta: Tensor         # K×E×E
    delta_bias: Tensor      # K×E
    A_log: Tensor           # E×N
    post_gamma: Tensor      # E
    post_beta: Tensor       # E
    W_out: Tensor           # E×C

    @classmethod
    def init(cls, dim: int, state_dim: int, seed: int, prefix: str,
             expand: int = 1, shared_directions: bool = False) -> "VSSBlockParams":
        e = expand * dim
        k = 1 if shared_directions else N_DIRECTIONS
        ku = lambda field, shape, fan_in: kaiming_uniform(seed, f"{prefix}.{field}", shape, fan_in)
        bias = delta_bias_init(k * e, param_rng(seed, f"{prefix}.delta_bias")).reshape(k, e)
        return cls(
            ln_gamma=constant(1.0, dim), ln_beta=constant(0.0, dim),
            W_gate=ku("W_gate", (dim, e), dim), W_in=ku("W_in", (dim, e), dim),
            dw_kernel=ku("dw_kernel", (e, 1, 3, 3), 9), dw_bias=constant(0.0, e),
            W_B=ku("W_B", (k, e, state_dim), e), W_C=ku("W_C", (k, e, state_dim), e),
            W_delta=ku("W_delta", (k, e, e), e),
            delta_bias=Tensor(bias, requires_grad=True),
            A_log=Tensor(a_log_init(e, state_dim), requires_grad=True),
            post_gamma=constant(1.0, e), post_beta=constant(0.0, e),
            W_out=ku("W_out", (e, dim), e),
        )

    @property
    def shared_directions(self) -> bool:
        return self.W_B.shape[0] == 1


def _directional(seqs: Tensor, weight: Tensor) -> Tensor:
    if weight.shape[0] == 1:
        return T.einsum("kbli,ij->kblj", seqs, T.reshape(weight, weight.shape[1:]))
    return T.einsum("kbli,kij->kblj", seqs, weight)


def ss2d(u, p: VSSBlockParams, discretization: str = "zoh") -> Tensor:
    """Expand ``u`` (B×H×W×E) in four directions, selective-scan each, merge."""
    u = T.as_tensor(u)
    b, h, w, e = u.shape
    seqs = scan_expand(u)                                  # 4×B×L×E
    length = h * w
    g = N_DIRECTIONS * b
    Bm = _directional(seqs, p.W_B)
    Cm = _directional(seqs, p.W_C)
    dbias = T.reshape(p.delta_bias, (p.delta_bias.shape[0], 1, 1, e))
    delta = T.softplus(T.add(_directional(seqs, p.W_delta), dbias))
    A = T.neg(T.exp(p.A_log))
    n = A.shape[-1]
    y = selective_scan_core(T.reshape(seqs, (g, length, e)), T.reshape(delta, (g, length, e)), A,
                            T.reshape(Bm, (g, length, n)), T.reshape(Cm, (g, length, n)),
                            discretization)
    return scan_merge(T.reshape(y, (N_DIRECTIONS, b, length, e)), h, w)


def depthwise3x3(x, kernel, bias) -> Tensor:
    """3×3 depthwise convolution, padding 1, on a channel-last map."""
    x = T.as_tensor(x)
    nchw = T.transpose(x, (0, 3, 1, 2))
    out = T.conv2d(nchw, kernel, bias, stride=1, padding=1, groups=x.shape[-1])
    return T.transpose(out, (0, 2, 3, 1))


def vss_block(x, p: VSSBlockParams, discretization: str = "zoh",
              mixer: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    """``x + W_out(LN_post(SS2D(SiLU(DWConv(W_in LN x)))) * SiLU(W_gate LN x))``.

    ``x`` is B×H×W×C (a bare H×W×C map is accepted too). ``mixer`` replaces
    the SS2D stage, which is how tests isolate the surrounding block.
    """
    x = T.as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[-1] != p.ln_gamma.shape[0]:
        raise ContractError(f"vss_block: input channels {x.shape[-1]} vs params {p.ln_gamma.shape[0]}")
    z = T.layernorm(x, p.ln_gamma, p.ln_beta)
    gate = T.silu(T.matmul(z, p.W_gate))
    s = T.silu(depthwise3x3(T.matmul(z, p.W_in), p.dw_kernel, p.dw_bias))
    s = mixer(s) if mixer is not None else ss2d(s, p, discretization)
    s = T.layernorm(s, p.post_gamma, p.post_beta)
    out = T.add(x, T.matmul(T.mul(s, gate), p.W_out))
    return T.reshape(out, out.shape[1:]) if squeeze else out
