"""The xLSTM-VMUNet: VSS encoder, xLSTM bottleneck, weighted fusion, VSS decoder.

Weights live in one flat ``{name: Tensor}`` dict; every forward call binds
the parameter groups it needs by name prefix. Feature maps are channel-last
(B×H×W×C) internally; the model input is B×C×H×W and the output is
B×1×H×W logits.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .params import bind, constant, flatten, kaiming_uniform
from .tensor import Tensor
from .vss import VSSBlockParams, vss_block
from .xlstm import MLSTMParams, SLSTMParams, block_diagonal_mask, mlstm_block, slstm_block

PATCH = 4
FUSION_MODES = ("learned", "fixed")
DISCRETIZATIONS = ("zoh", "euler")


@dataclass(frozen=True)
class ModelConfig:
    height: int = 256
    width: int = 256
    in_channels: int = 3
    widths: tuple[int, ...] = (32, 64, 128, 256)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    state_dim: int = 16
    use_slstm: bool = True
    use_mlstm: bool = True
    fusion: str = "learned"
    expand: int = 1
    slstm_heads: int = 4
    ss2d_shared: bool = False
    discretization: str = "zoh"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if not self.widths or len(self.widths) != len(self.depths):
            raise ConfigurationError(
                f"widths {self.widths} and depths {self.depths} must be nonempty and of equal length")
        if min(self.widths) < 1 or min(self.depths) < 0:
            raise ConfigurationError("widths must be positive and depths nonnegative")
        for name in ("in_channels", "state_dim", "expand", "slstm_heads"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        factor = PATCH * 2 ** (self.stages - 1)
        if self.height < 1 or self.width < 1 or self.height % factor or self.width % factor:
            raise ConfigurationError(
                f"resolution {self.height}×{self.width} must be divisible by {factor} "
                f"for {self.stages} stages")
        if self.fusion not in FUSION_MODES:
            raise ConfigurationError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.discretization not in DISCRETIZATIONS:
            raise ConfigurationError(
                f"discretization must be one of {DISCRETIZATIONS}, got {self.discretization!r}")
        if self.use_slstm:
            block_diagonal_mask(self.widths[-1], self.slstm_heads)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Laptop-scale preset: 64×64 grayscale, four narrow stages, one block each."""
        base = dict(height=64, width=64, in_channels=1, widths=(16, 32, 64, 128),
                    depths=(1, 1, 1, 1), state_dim=8)
        base.update(overrides)
        return cls(**base)

    @property
    def stages(self) -> int:
        return len(self.widths)

    @property
    def bottleneck_shape(self) -> tuple[int, int, int]:
        f = PATCH * 2 ** (self.stages - 1)
        return self.height // f, self.width // f, self.widths[-1]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"], d["depths"] = list(self.widths), list(self.depths)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class XLSTMGateParams:
    """Input maps W, recurrent maps U and biases of the bottleneck LSTM pass."""

    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_g: Tensor
    U_i: Tensor
    U_f: Tensor
    U_o: Tensor
    U_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    @classmethod
    def init(cls, dim: int, seed: int, prefix: str) -> "XLSTMGateParams":
        kw = {}
        for g in "ifog":
            kw[f"W_{g}"] = kaiming_uniform(seed, f"{prefix}.W_{g}", (dim, dim), dim)
            kw[f"U_{g}"] = kaiming_uniform(seed, f"{prefix}.U_{g}", (dim, dim), dim)
            kw[f"b_{g}"] = constant(0.0, dim)
        return cls(**kw)

    @property
    def dim(self) -> int:
        return self.W_i.shape[0]


@dataclass
class FusionParams:
    alpha: Tensor
    beta: Tensor

    @classmethod
    def init(cls, learned: bool = True, alpha: float = 0.5, beta: float = 0.5) -> "FusionParams":
        return cls(Tensor(np.array(alpha), requires_grad=learned),
                   Tensor(np.array(beta), requires_grad=learned))


@dataclass
class Conv:
    kernel: Tensor
    bias: Tensor


def _conv(seed, name, cout, cin, k) -> Conv:
    return Conv(kaiming_uniform(seed, f"{name}.kernel", (cout, cin, k, k), cin * k * k),
                constant(0.0, cout))


def _tconv(seed, name, cin, cout, k) -> Conv:
    # C_in×C_out×k×k, the conv_transpose2d layout
    return Conv(kaiming_uniform(seed, f"{name}.kernel", (cin, cout, k, k), cin), constant(0.0, cout))


# --- weights -------------------------------------------------------------------

def init_weights(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh weights keyed by name. Same (seed, name) gives the same tensor in every config."""
    c = config
    w: dict[str, Tensor] = {}
    block = lambda width, prefix: VSSBlockParams.init(
        width, c.state_dim, seed, prefix, expand=c.expand, shared_directions=c.ss2d_shared)
    w.update(flatten(_conv(seed, "embed", c.widths[0], c.in_channels, PATCH), "embed"))
    for l, width in enumerate(c.widths):
        for j in range(c.depths[l]):
            w.update(flatten(block(width, f"enc{l}.{j}"), f"enc{l}.{j}"))
        if l < c.stages - 1:
            w.update(flatten(_conv(seed, f"down{l}", c.widths[l + 1], width, 2), f"down{l}"))
    d = c.widths[-1]
    w.update(flatten(XLSTMGateParams.init(d, seed, "lstm"), "lstm"))
    if c.use_slstm:
        w.update(flatten(SLSTMParams.init(d, seed, "slstm", heads=c.slstm_heads), "slstm"))
    if c.use_mlstm:
        w.update(flatten(MLSTMParams.init(d, seed, "mlstm"), "mlstm"))
    w.update(flatten(FusionParams.init(learned=c.fusion == "learned"), "fusion"))
    for l in range(c.stages - 2, -1, -1):
        w.update(flatten(_tconv(seed, f"up{l}", c.widths[l + 1], c.widths[l], 2), f"up{l}"))
        for j in range(c.depths[l]):
            w.update(flatten(block(c.widths[l], f"dec{l}.{j}"), f"dec{l}.{j}"))
    w.update(flatten(_tconv(seed, "head", c.widths[0], 1, PATCH), "head"))
    for name, t in w.items():
        t.name = name
    return w


def check_weights(config: ModelConfig, weights: Mapping[str, Tensor]) -> None:
    """Names and shapes of ``weights`` must match what ``config`` initializes."""
    expected = {k: v.shape for k, v in init_weights(config, 0).items()}
    missing = sorted(set(expected) - set(weights))
    extra = sorted(set(weights) - set(expected))
    if missing or extra:
        raise ConfigurationError(f"weights do not match config: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, shape in expected.items():
        if weights[k].shape != shape:
            raise ConfigurationError(f"weight {k!r} has shape {weights[k].shape}, config needs {shape}")


# --- patch convolutions on channel-last maps --------------------------------------

def patch_conv(x, conv: Conv, k: int) -> Tensor:
    """k×k convolution with stride k on B×H×W×C; same result as ``conv2d(..., stride=k)``."""
    x = T.as_tensor(x)
    b, h, w, c = x.shape
    cout = conv.kernel.shape[0]
    if h % k or w % k or conv.kernel.shape[1] != c:
        raise ContractError(f"patch_conv: map {x.shape} vs kernel {conv.kernel.shape}")
    patches = T.transpose(T.reshape(x, (b, h // k, k, w // k, k, c)), (0, 1, 3, 5, 2, 4))
    flat = T.reshape(patches, (b, h // k, w // k, c * k * k))
    kernel = T.transpose(T.reshape(conv.kernel, (cout, c * k * k)), (1, 0))
    return T.add(T.matmul(flat, kernel), conv.bias)


def patch_expand(x, conv: Conv, k: int) -> Tensor:
    """Transposed k×k convolution with stride k on B×h×w×C_in -> B×kh×kw×C_out."""
    x = T.as_tensor(x)
    b, h, w, cin = x.shape
    cout = conv.kernel.shape[1]
    if conv.kernel.shape[0] != cin:
        raise ContractError(f"patch_expand: map {x.shape} vs kernel {conv.kernel.shape}")
    cols = T.reshape(T.matmul(x, T.reshape(conv.kernel, (cin, cout * k * k))), (b, h, w, cout, k, k))
    out = T.reshape(T.transpose(cols, (0, 1, 4, 2, 5, 3)), (b, h * k, w * k, cout))
    return T.add(out, conv.bias)


# --- components -----------------------------------------------------------------

def _blocks(x: Tensor, weights, prefix: str, depth: int, config: ModelConfig) -> Tensor:
    for j in range(depth):
        x = vss_block(x, bind(VSSBlockParams, weights, f"{prefix}.{j}"), config.discretization)
    return x


def _batched_input(x, config: ModelConfig) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ContractError(f"expected C×H×W or B×C×H×W input, got {x.shape}")
    want = (config.in_channels, config.height, config.width)
    if x.shape[1:] != want:
        raise ConfigurationError(f"input {x.shape[1]}×{x.shape[2]}×{x.shape[3]} does not match "
                                 f"config {want[0]}×{want[1]}×{want[2]}")
    return x, squeeze


def vssm_encode(x, config: ModelConfig, weights) -> tuple[list[Tensor], Tensor]:
    """Skip features of each non-final stage and the bottleneck map, all B×h×w×C."""
    x, _ = _batched_input(x, config)
    f = T.relu(patch_conv(T.transpose(x, (0, 2, 3, 1)), bind(Conv, weights, "embed"), PATCH))
    skips = []
    for l in range(config.stages):
        f = _blocks(f, weights, f"enc{l}", config.depths[l], config)
        if l < config.stages - 1:
            skips.append(f)
            f = T.relu(patch_conv(f, bind(Conv, weights, f"down{l}"), 2))
    return skips, f


def to_sequence(f) -> Tensor:
    """(..., h, w, C) -> (..., h*w, C), row-major."""
    f = T.as_tensor(f)
    *lead, h, w, c = f.shape
    return T.reshape(f, (*lead, h * w, c))


def from_sequence(seq, h: int, w: int) -> Tensor:
    seq = T.as_tensor(seq)
    *lead, length, c = seq.shape
    if length != h * w:
        raise ContractError(f"from_sequence: length {length} does not fill a {h}×{w} map")
    return T.reshape(seq, (*lead, h, w, c))


def lstm_pass(p: XLSTMGateParams, seq) -> Tensor:
    """Plain LSTM over B×L×D: sigmoid i, f, o; tanh candidate; ``h = o * tanh(c)``."""
    seq = T.as_tensor(seq)
    b, length, d = seq.shape
    if d != p.dim:
        raise ContractError(f"lstm_pass: width {d} vs params {p.dim}")
    xg = {g: T.add(T.matmul(seq, getattr(p, f"W_{g}")), getattr(p, f"b_{g}")) for g in "ifog"}
    c = h = T.as_tensor(np.zeros((b, d)))
    hs = []
    for t in range(length):
        pre = {g: T.add(xg[g][:, t], T.matmul(h, getattr(p, f"U_{g}"))) for g in "ifog"}
        i, f, o = T.sigmoid(pre["i"]), T.sigmoid(pre["f"]), T.sigmoid(pre["o"])
        c = T.add(T.mul(f, c), T.mul(i, T.tanh(pre["g"])))
        h = T.mul(o, T.tanh(c))
        hs.append(h)
    return T.stack(hs, axis=1)


def xlstm_bottleneck(f, config: ModelConfig, weights) -> Tensor:
    """LSTM pass over the row-major bottleneck sequence, then sLSTM and/or mLSTM blocks."""
    f = T.as_tensor(f)
    _, h, w, d = f.shape
    if d != config.widths[-1]:
        raise ContractError(f"bottleneck width {d} vs config {config.widths[-1]}")
    seq = lstm_pass(bind(XLSTMGateParams, weights, "lstm"), to_sequence(f))
    if config.use_slstm:
        seq = slstm_block(bind(SLSTMParams, weights, "slstm", heads=config.slstm_heads), seq)
    if config.use_mlstm:
        seq = mlstm_block(bind(MLSTMParams, weights, "mlstm"), seq)
    return from_sequence(seq, h, w)


def fuse(f_vssm, h_xlstm, p: FusionParams) -> Tensor:
    f_vssm, h_xlstm = T.as_tensor(f_vssm), T.as_tensor(h_xlstm)
    if f_vssm.shape != h_xlstm.shape:
        raise ContractError(f"fuse: shapes {f_vssm.shape} and {h_xlstm.shape} differ")
    return T.add(T.mul(p.alpha, f_vssm), T.mul(p.beta, h_xlstm))


def vssm_decode(f, skips, config: ModelConfig, weights) -> Tensor:
    """Upsample, add skip, VSS blocks per stage; then a 4× patch expansion to B×1×H×W logits."""
    f = T.as_tensor(f)
    if len(skips) != config.stages - 1:
        raise ContractError(f"expected {config.stages - 1} skip maps, got {len(skips)}")
    for l in range(config.stages - 2, -1, -1):
        up = patch_expand(f, bind(Conv, weights, f"up{l}"), 2)
        if up.shape != skips[l].shape:
            raise ContractError(f"decoder stage {l}: upsampled {up.shape} vs skip {skips[l].shape}")
        f = _blocks(T.add(up, skips[l]), weights, f"dec{l}", config.depths[l], config)
    logits = patch_expand(f, bind(Conv, weights, "head"), PATCH)
    return T.transpose(logits, (0, 3, 1, 2))


def forward(x, config: ModelConfig, weights) -> Tensor:
    """encode -> xLSTM bottleneck -> fuse -> decode. C×H×W input gives 1×H×W logits."""
    _, squeeze = _batched_input(x, config)
    skips, bottleneck = vssm_encode(x, config, weights)
    fused = fuse(bottleneck, xlstm_bottleneck(bottleneck, config, weights),
                 bind(FusionParams, weights, "fusion"))
    logits = vssm_decode(fused, skips, config, weights)
    return T.reshape(logits, logits.shape[1:]) if squeeze else logits


ABLATION_VARIANTS = {1: (False, False), 2: (True, False), 3: (False, True), 4: (True, True)}


def ablation_configs(base: ModelConfig) -> dict[int, ModelConfig]:
    """The four sLSTM/mLSTM on/off variants, numbered 1..4."""
    return {v: base.replace(use_slstm=s, use_mlstm=m) for v, (s, m) in ABLATION_VARIANTS.items()}
