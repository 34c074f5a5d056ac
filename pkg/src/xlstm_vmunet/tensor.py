"""Dense float64 tensors with reverse-mode differentiation over a recorded tape.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape every op is a plain
numpy computation, which is what inference uses.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> backward(loss, tape, [w])[0]
    array([[2., 4.]])
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import ConfigurationError, ContractError, ShapeError

__all__ = [
    "Tensor", "Tape", "backward", "record", "as_tensor",
    "add", "sub", "mul", "div", "neg", "exp", "log", "expm1", "phi1", "abs_",
    "maximum", "clip", "sigmoid", "tanh", "relu", "silu", "gelu", "softplus",
    "sum_", "mean", "reshape", "transpose", "take", "concat", "stack",
    "matmul", "einsum", "conv2d", "conv_transpose2d", "max_pool2d",
    "avg_pool2d", "upsample_nearest2d", "layernorm",
]

_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended at creation time, so the list is already in
    topological order. Use as a context manager; tapes nest.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Immutable n-dimensional float64 value, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(arr, dtype=np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def assign(self, value) -> None:
        """Replace the value in place (optimizer updates). Shape must not change."""
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign: shape {arr.shape} does not match {self.data.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        arr.flags.writeable = False
        self.data = arr

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return _getitem(self, index)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else (axes or None))


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64), False)


def record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as an op output and put a node on the active tape.

    ``backward(g)`` receives the output gradient and must return one array
    (or ``None``) per parent, in order. This is the extension point custom
    fused ops use.
    """
    needs = any(p.requires_grad for p in parents)
    tape = current_tape()
    out = Tensor._wrap(data, needs and tape is not None)
    if out.requires_grad:
        tape.nodes.append(_Node(out, tuple(parents), backward))
    return out


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] | None = None):
    """Propagate d(loss)/d(.) through ``tape`` in reverse order.

    Leaves that require grad get ``.grad`` set (overwritten, never summed
    across calls). With ``wrt`` the gradients are also returned as a list,
    zeros for leaves the loss does not reach.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    produced = {id(node.out) for node in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        pgrads = node.backward(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
            if key not in produced:
                leaves[key] = p
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
    if wrt is None:
        return None
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else g)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape),
                             _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,))


def _unary(a, value: np.ndarray, dvalue: Callable[[], np.ndarray]) -> Tensor:
    return record(value, (a,), lambda g: (g * dvalue(),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _unary(a, out, lambda: out)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.log(a.data), lambda: 1.0 / a.data)


def expm1(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.expm1(a.data), lambda: np.exp(a.data))


def phi1_values(z: np.ndarray) -> np.ndarray:
    """``expm1(z) / z`` on plain arrays, series-expanded near 0."""
    small = np.abs(z) < 1e-5
    zs = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z / 2 + z * z / 6, np.expm1(zs) / zs)


def _dphi1_np(z: np.ndarray) -> np.ndarray:
    small = np.abs(z) < 1e-4
    zs = np.where(small, 1.0, z)
    big = (zs * np.exp(zs) - np.expm1(zs)) / (zs * zs)
    return np.where(small, 0.5 + z / 3 + z * z / 8, big)


def phi1(a) -> Tensor:
    """``expm1(z) / z`` with its removable singularity at 0 filled in."""
    a = as_tensor(a)
    return _unary(a, phi1_values(a.data), lambda: _dphi1_np(a.data))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.abs(a.data), lambda: np.sign(a.data))


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; the gradient passes only where ``a > floor``."""
    a = as_tensor(a)
    return _unary(a, np.maximum(a.data, floor), lambda: (a.data > floor).astype(np.float64))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _unary(a, np.clip(a.data, lo, hi), lambda: inside.astype(np.float64))


# --- activations --------------------------------------------------------------

def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = special.expit(a.data)
    return _unary(a, s, lambda: s * (1.0 - s))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _unary(a, t, lambda: 1.0 - t * t)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.maximum(a.data, 0.0), lambda: (a.data > 0).astype(np.float64))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = special.expit(a.data)
    return _unary(a, a.data * s, lambda: s * (1.0 + a.data * (1.0 - s)))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + special.erf(a.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
    return _unary(a, a.data * cdf, lambda: cdf + a.data * pdf)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.logaddexp(0.0, a.data), lambda: special.expit(a.data))


# --- reductions and shape plumbing -------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    return record(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return record(a.data[index], (a,), bw)


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    axis = axis % a.ndim

    def bw(g):
        full = np.zeros_like(a.data)
        idx = [slice(None)] * a.ndim
        idx[axis] = indices
        np.add.at(full, tuple(idx), g)
        return (full,)
    return record(np.take(a.data, indices, axis=axis), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return record(np.concatenate([t.data for t in ts], axis=axis), ts,
                  lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    n = len(ts)
    return record(np.stack([t.data for t in ts], axis=axis), ts,
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# --- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))
    return record(out, (a, b), bw)


def einsum(subscripts: str, *operands) -> Tensor:
    """Differentiable ``np.einsum`` with explicit output (``'ij,jk->ik'``).

    Repeated indices inside a single operand are not supported.
    """
    ts = [as_tensor(t) for t in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ts):
        raise ContractError(f"einsum: {len(in_subs)} subscripts for {len(ts)} operands")
    for s in in_subs:
        if len(set(s)) != len(s):
            raise ContractError(f"einsum: repeated index in operand {s!r}")
    data = np.einsum(subscripts, *[t.data for t in ts], optimize=True)

    def bw(g):
        res = []
        for i, (t, s) in enumerate(zip(ts, in_subs)):
            if not t.requires_grad:
                res.append(None)
                continue
            others = [(in_subs[j], ts[j].data) for j in range(len(ts)) if j != i]
            avail = set(out_sub).union(*[set(o) for o, _ in others]) if others else set(out_sub)
            kept = "".join(c for c in s if c in avail)
            spec = ",".join([out_sub] + [o for o, _ in others]) + "->" + kept
            r = np.einsum(spec, g, *[d for _, d in others], optimize=True)
            if kept != s:
                r = r.reshape([t.shape[k] if c in avail else 1 for k, c in enumerate(s)])
                r = np.broadcast_to(r, t.shape)
            res.append(r)
        return tuple(res)
    return record(data, ts, bw)


# --- convolution, pooling, resampling ----------------------------------------

def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected C×H×W or B×C×H×W input, got {x.shape}")
    return x, False


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _scatter_windows(cols: np.ndarray, padded_hw: tuple[int, int], stride: int) -> np.ndarray:
    # cols: B×C×Ho×Wo×k×k -> B×C×Hp×Wp (adjoint of _windows)
    b, c, ho, wo, k, _ = cols.shape
    out = np.zeros((b, c) + padded_hw)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[..., i, j]
    return out


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation of a C_in×H×W (or batched) input with C_out×(C_in/groups)×k×k."""
    x, squeeze = _as_batched(as_tensor(x))
    kernel = as_tensor(kernel)
    b, cin, h, w = x.shape
    cout, cpg, k, k2 = kernel.shape
    if k != k2:
        raise ConfigurationError(f"conv2d: square kernels only, got {kernel.shape}")
    if padding and k % 2 == 0:
        raise ConfigurationError(f"conv2d: padded convolution needs an odd kernel, got k={k}")
    if cin % groups or cout % groups or cpg != cin // groups:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape} at groups={groups}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if (hp - k) % stride or (wp - k) % stride or hp < k or wp < k:
        raise ConfigurationError(
            f"conv2d: non-integral output extent for {h}×{w}, k={k}, stride={stride}, padding={padding}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    win = _windows(xp, k, stride).reshape(b, groups, cpg, ho, wo, k, k)
    wk = kernel.data.reshape(groups, cout // groups, cpg, k, k)
    out = np.einsum("bgchwij,gocij->bgohw", win, wk, optimize=True).reshape(b, cout, ho, wo)

    def bw(g):
        gg = g.reshape(b, groups, cout // groups, ho, wo)
        gx = gk = None
        if x.requires_grad:
            gwin = np.einsum("bgohw,gocij->bgchwij", gg, wk, optimize=True)
            gxp = _scatter_windows(gwin.reshape(b, cin, ho, wo, k, k), (hp, wp), stride)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        if kernel.requires_grad:
            gk = np.einsum("bgohw,bgchwij->gocij", gg, win, optimize=True).reshape(kernel.shape)
        return gx, gk
    out_t = record(out, (x, kernel), bw)
    if bias is not None:
        out_t = add(out_t, reshape(as_tensor(bias), (1, cout, 1, 1)))
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def conv_transpose2d(x, kernel, bias=None, stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d` (no padding). Kernel layout C_in×C_out×k×k."""
    x, squeeze = _as_batched(as_tensor(x))
    kernel = as_tensor(kernel)
    b, cin, h, w = x.shape
    if kernel.shape[0] != cin:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with kernel {kernel.shape}")
    _, cout, k, _ = kernel.shape
    ho, wo = (h - 1) * stride + k, (w - 1) * stride + k
    cols = np.einsum("bchw,coij->bohwij", x.data, kernel.data, optimize=True)
    out = _scatter_windows(cols, (ho, wo), stride)

    def bw(g):
        gwin = _windows(g, k, stride)
        gx = np.einsum("bohwij,coij->bchw", gwin, kernel.data, optimize=True) if x.requires_grad else None
        gk = np.einsum("bchw,bohwij->coij", x.data, gwin, optimize=True) if kernel.requires_grad else None
        return gx, gk
    out_t = record(out, (x, kernel), bw)
    if bias is not None:
        out_t = add(out_t, reshape(as_tensor(bias), (1, cout, 1, 1)))
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def _pool_view(x: Tensor, k: int) -> np.ndarray:
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ConfigurationError(f"pooling: {h}×{w} not divisible by {k}")
    return x.data.reshape(b, c, h // k, k, w // k, k)


def max_pool2d(x, k: int = 2) -> Tensor:
    x, squeeze = _as_batched(as_tensor(x))
    v = _pool_view(x, k)
    b, c, hk, _, wk, _ = v.shape
    flat = v.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hk, wk, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
        return (gf.reshape(b, c, hk, wk, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape),)
    out_t = record(out, (x,), bw)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def avg_pool2d(x, k: int = 2) -> Tensor:
    x, squeeze = _as_batched(as_tensor(x))
    v = _pool_view(x, k)
    out = v.mean(axis=(3, 5))

    def bw(g):
        return (np.broadcast_to(g[:, :, :, None, :, None] / (k * k), v.shape).reshape(x.shape),)
    out_t = record(out, (x,), bw)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def upsample_nearest2d(x, factor: int = 2) -> Tensor:
    x, squeeze = _as_batched(as_tensor(x))
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)
    out_t = record(out, (x,), bw)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


# --- normalization ------------------------------------------------------------

def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the per-channel affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layernorm: channel extent {c} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        gxhat = g * gamma.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)
    return record(out, (x, gamma, beta), bw)
