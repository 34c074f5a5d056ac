"""Loss, metrics, optimizer, schedule and the (cross-validated) training loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import expit

from . import tensor as T
from .errors import ConfigurationError, ContractError, DataError, NumericalAbort
from .network import ModelConfig, forward, init_weights
from .tensor import Tape, Tensor, backward


# --- loss ----------------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0    # BCE weight
    lambda2: float = 1.0    # Dice weight
    eps: float = 1e-7
    smooth: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or (self.lambda1 == 0 and self.lambda2 == 0):
            raise ConfigurationError(
                f"loss weights must be nonnegative and not both zero, got {self.lambda1}, {self.lambda2}")
        if not 0 < self.eps < 0.5 or self.smooth < 0:
            raise ConfigurationError(f"bad eps {self.eps} or smooth {self.smooth}")


def check_binary(mask: np.ndarray, what: str = "target") -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        bad = np.unique(mask[(mask != 0.0) & (mask != 1.0)])[:5]
        raise DataError(f"{what} must contain only 0 and 1, found {bad.tolist()}")
    return mask


def loss_terms(logits, target, cfg: LossConfig = LossConfig()) -> tuple[Tensor, Tensor]:
    """(BCE, Dice) losses. A leading batch axis (ndim 4) gives per-sample Dice, averaged."""
    logits = T.as_tensor(logits)
    y = check_binary(target)
    if y.shape != logits.shape:
        raise ContractError(f"logits {logits.shape} vs target {y.shape}")
    p = T.clip(T.sigmoid(logits), cfg.eps, 1.0 - cfg.eps)
    ll = T.add(T.mul(y, T.log(p)), T.mul(1.0 - y, T.log(T.sub(1.0, p))))
    bce = T.neg(T.mean(ll))
    axes = tuple(range(1, logits.ndim)) if logits.ndim == 4 else None
    inter = T.sum_(T.mul(p, y), axis=axes)
    total = T.add(T.sum_(p, axis=axes), y.sum(axis=axes))
    dice = T.sub(1.0, T.div(T.add(T.mul(inter, 2.0), cfg.smooth), T.add(total, cfg.smooth)))
    return bce, T.mean(dice)


def bce_dice_loss(logits, target, cfg: LossConfig = LossConfig()) -> Tensor:
    bce, dice = loss_terms(logits, target, cfg)
    return T.add(T.mul(bce, cfg.lambda1), T.mul(dice, cfg.lambda2))


# --- metrics -------------------------------------------------------------------

def dsc_iou(pred, gt, threshold: float = 0.5) -> tuple[float, float]:
    """Pooled Dice and IoU. ``pred`` is binarized at ``pred >= threshold``; empty vs empty scores 1."""
    pred, gt = np.asarray(pred, dtype=np.float64), check_binary(gt, "ground truth")
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    x = pred >= threshold
    y = gt == 1.0
    inter = int(np.count_nonzero(x & y))
    nx, ny = int(np.count_nonzero(x)), int(np.count_nonzero(y))
    union = nx + ny - inter
    if union == 0:
        return 1.0, 1.0
    return 2 * inter / (nx + ny), inter / union


# --- optimizer and schedule ------------------------------------------------------

@dataclass
class AdamW:
    """Adam with decoupled weight decay, applied as ``p *= 1 - lr*decay`` before the step."""

    params: Mapping[str, Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("AdamW: lr, decay >= 0 and betas in [0, 1) required")
        self.params = dict(self.params)
        for name, p in self.params.items():
            if p.requires_grad:
                self.m.setdefault(name, np.zeros_like(p.data))
                self.v.setdefault(name, np.zeros_like(p.data))

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        c1, c2 = 1.0 - self.beta1 ** t, 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            g = grads.get(name)
            g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ContractError(f"AdamW: gradient for {name!r} has shape {g.shape}, param {p.shape}")
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            value = p.data * (1.0 - self.lr * self.weight_decay)
            value = value - self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            if not np.all(np.isfinite(value)):
                raise NumericalAbort(f"AdamW step {t}: non-finite update for {name!r}")
            p.assign(value)


@dataclass(frozen=True)
class CosineSchedule:
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    t_max: int = 30

    def __post_init__(self):
        if self.t_max < 1 or not 0 <= self.lr_min <= self.lr_max:
            raise ConfigurationError(f"bad schedule {self}")


def cosine_lr(s: CosineSchedule, t: float) -> float:
    if not 0 <= t <= s.t_max:
        raise ContractError(f"epoch {t} outside [0, {s.t_max}]")
    w = 0.5 * (1.0 + math.cos(math.pi * t / s.t_max))
    if w == 1.0:
        return s.lr_max
    # lr_min + nonnegative * w is monotone in w under rounding; the clamp keeps
    # the last ulp from overshooting lr_max
    return min(s.lr_max, s.lr_min + (s.lr_max - s.lr_min) * w)


# --- training loop ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-2
    folds: int = 1
    val_fraction: float = 0.2
    seed: int = 0
    flips: bool = False
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.folds < 1:
            raise ConfigurationError("epochs, batch_size and folds must be at least 1")
        if self.folds == 1 and not 0 < self.val_fraction < 1:
            raise ConfigurationError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        LossConfig(self.lambda1, self.lambda2)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lambda1, self.lambda2)


def fold_splits(n: int, folds: int, seed: int, val_fraction: float = 0.2) -> list[tuple[np.ndarray, np.ndarray]]:
    """(train, val) index pairs from one seeded shuffle of ``range(n)``."""
    if n < 2:
        raise DataError(f"need at least 2 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    if folds == 1:
        n_val = min(n - 1, max(1, int(round(n * val_fraction))))
        return [(np.sort(order[:n - n_val]), np.sort(order[n - n_val:]))]
    if folds > n:
        raise ConfigurationError(f"{folds} folds for {n} samples")
    chunks = np.array_split(order, folds)
    return [(np.sort(np.concatenate(chunks[:k] + chunks[k + 1:])), np.sort(chunks[k])) for k in range(folds)]


def predict_proba(images, config: ModelConfig, weights, batch_size: int = 8) -> np.ndarray:
    """Sigmoid probabilities, N×H×W, evaluated without a tape."""
    images = np.asarray(images, dtype=np.float64)
    out = [forward(images[i:i + batch_size], config, weights).data[:, 0]
           for i in range(0, len(images), batch_size)]
    return expit(np.concatenate(out))


def _masks(masks) -> np.ndarray:
    m = check_binary(masks, "mask")
    return m[:, 0] if m.ndim == 4 else m


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    best_dsc: float
    best_iou: float
    weights: dict


@dataclass
class TrainResult:
    config: ModelConfig
    train_config: TrainConfig
    history: list[dict]
    folds: list[FoldResult]

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([f.best_dsc for f in self.folds]))

    @property
    def mean_iou(self) -> float:
        return float(np.mean([f.best_iou for f in self.folds]))

    @property
    def best(self) -> FoldResult:
        return max(self.folds, key=lambda f: f.best_dsc)

    def best_weights(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True) for k, v in self.best.weights.items()}


def _flip(images: np.ndarray, masks: np.ndarray, rng: np.random.Generator):
    images, masks = images.copy(), masks.copy()
    for i in range(len(images)):
        if rng.random() < 0.5:
            images[i], masks[i] = images[i, :, :, ::-1], masks[i, :, ::-1]
        if rng.random() < 0.5:
            images[i], masks[i] = images[i, :, ::-1], masks[i, ::-1]
    return images, masks


def train(config: ModelConfig, tc: TrainConfig, images, masks,
          log: Callable[[dict], None] | None = None) -> TrainResult:
    """Train one model per fold; keep each fold's best-validation-DSC weights.

    ``images`` is N×C×H×W in [0, 1], ``masks`` N×H×W binary. ``log`` receives
    one record per epoch with the metrics-log fields.
    """
    images = np.asarray(images, dtype=np.float64)
    masks = _masks(masks)
    if len(images) == 0 or len(images) != len(masks):
        raise DataError(f"{len(images)} images vs {len(masks)} masks")
    if images.ndim != 4 or images.shape[1:] != (config.in_channels, config.height, config.width):
        raise ConfigurationError(f"images {images.shape[1:]} do not match config "
                                 f"{(config.in_channels, config.height, config.width)}")
    schedule = CosineSchedule(tc.lr, tc.lr_min, tc.epochs)
    history: list[dict] = []
    results = []
    for fold, (tr, va) in enumerate(fold_splits(len(images), tc.folds, tc.seed, tc.val_fraction)):
        weights = init_weights(config, tc.seed)
        opt = AdamW(weights, lr=tc.lr, weight_decay=tc.weight_decay)
        best = FoldResult(fold, 0, -1.0, 0.0, {})
        for epoch in range(tc.epochs):
            opt.lr = cosine_lr(schedule, epoch)
            rng = np.random.default_rng([tc.seed, fold, epoch])
            order = tr[rng.permutation(len(tr))]
            total, count = 0.0, 0
            for start in range(0, len(order), tc.batch_size):
                idx = order[start:start + tc.batch_size]
                x, y = images[idx], masks[idx]
                if tc.flips:
                    x, y = _flip(x, y, rng)
                with Tape() as tape:
                    loss = bce_dice_loss(forward(x, config, weights), y[:, None], tc.loss)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalAbort(
                        f"non-finite loss {value} at fold {fold}, epoch {epoch + 1}, batch {start // tc.batch_size}")
                names = [k for k, p in weights.items() if p.requires_grad]
                grads = backward(loss, tape, [weights[k] for k in names])
                opt.step(dict(zip(names, grads)))
                total += value * len(idx)
                count += len(idx)
            dsc, iou = dsc_iou(predict_proba(images[va], config, weights, tc.batch_size), masks[va])
            record = {"fold": fold, "epoch": epoch + 1, "train_loss": total / count,
                      "val_dsc": dsc, "val_iou": iou, "lr": opt.lr}
            history.append(record)
            if log is not None:
                log(record)
            if dsc > best.best_dsc:
                best = FoldResult(fold, epoch + 1, dsc, iou, {k: p.data.copy() for k, p in weights.items()})
        results.append(best)
    return TrainResult(config, tc, history, results)


def jsonl_writer(path) -> Callable[[dict], None]:
    """Append-per-record metrics logger; the file is truncated on creation."""
    with open(path, "w", encoding="utf-8"):
        pass

    def write(record: dict) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
    return write


def evaluate(config: ModelConfig, weights, images, masks, batch_size: int = 8) -> tuple[float, float]:
    return dsc_iou(predict_proba(images, config, weights, batch_size), _masks(masks))
