"""scikit-learn style wrapper: ``fit`` on image/mask arrays, ``predict`` masks."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigurationError, DataError
from .network import ModelConfig, check_weights
from .tensor import Tensor
from .training import TrainConfig, dsc_iou, predict_proba, train


def check_images(X, channels: int | None = None) -> np.ndarray:
    """N×C×H×W float array in [0, 1]; an N×H×W input gets a channel axis."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[0] == 0:
        raise DataError(f"expected N×H×W or N×C×H×W images, got shape {X.shape}")
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise DataError("image values must be finite and within [0, 1]")
    if channels is not None and X.shape[1] != channels:
        raise ConfigurationError(f"model expects {channels} channels, got {X.shape[1]}")
    return X


def check_masks(y, X: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 4 and y.shape[1] == 1:
        y = y[:, 0]
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise DataError(f"masks {y.shape} do not match images {X.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("masks must be binary (0/1)")
    return y


class XLSTMVMUNetSegmenter(BaseEstimator):
    """Binary segmenter. Resolution and channel count are taken from ``X`` at fit time."""

    def __init__(self, widths=(16, 32, 64, 128), depths=(1, 1, 1, 1), state_dim=8,
                 use_slstm=True, use_mlstm=True, fusion="learned", epochs=30, batch_size=8,
                 lr=1e-3, weight_decay=1e-2, val_fraction=0.2, seed=0, threshold=0.5):
        self.widths = widths
        self.depths = depths
        self.state_dim = state_dim
        self.use_slstm = use_slstm
        self.use_mlstm = use_mlstm
        self.fusion = fusion
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.val_fraction = val_fraction
        self.seed = seed
        self.threshold = threshold

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        self.config_ = ModelConfig(
            height=X.shape[2], width=X.shape[3], in_channels=X.shape[1], widths=tuple(self.widths),
            depths=tuple(self.depths), state_dim=self.state_dim, use_slstm=self.use_slstm,
            use_mlstm=self.use_mlstm, fusion=self.fusion)
        tc = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                         weight_decay=self.weight_decay, val_fraction=self.val_fraction, seed=self.seed)
        result = train(self.config_, tc, X, y)
        self.history_ = result.history
        self.weights_ = result.best_weights()
        self.best_val_dsc_ = result.best.best_dsc
        return self

    @classmethod
    def from_weights(cls, config: ModelConfig, weights: dict, **params) -> "XLSTMVMUNetSegmenter":
        """Wrap existing weights (e.g. a loaded checkpoint) without training."""
        est = cls(widths=config.widths, depths=config.depths, state_dim=config.state_dim,
                  use_slstm=config.use_slstm, use_mlstm=config.use_mlstm, fusion=config.fusion, **params)
        weights = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in weights.items()}
        check_weights(config, weights)
        est.config_, est.weights_, est.history_ = config, weights, []
        return est

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        X = check_images(X, self.config_.in_channels)
        return predict_proba(X, self.config_, self.weights_, self.batch_size)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y) -> float:
        """Pooled Dice coefficient of the thresholded prediction."""
        X = check_images(X)
        return dsc_iou(self.predict_proba(X), check_masks(y, X), self.threshold)[0]
