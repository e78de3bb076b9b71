"""Scikit-learn compatible facade over the training engine.

``GlyphClassifier`` exposes the usual fit/predict/predict_proba surface (and
``get_params``/``set_params`` via ``BaseEstimator``) so the engine composes
with pipelines, grid search, and ``cross_val_score``.  ``ImagePreprocessor``
is the matching transformer that maps raw pixel grids to the 1x32x32 float
representation the network consumes.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import AugmentConfig, Sample, preprocess
from .explain import Heatmap, grad_cam
from .layers import mv3_mini_config, softmax
from .tensor import DTYPE, Tensor
from .training import TrainConfig, fit_model

__all__ = ["GlyphClassifier", "ImagePreprocessor", "check_image_batch"]

_IMG = 32


def check_image_batch(X) -> np.ndarray:
    """Validate and reshape input images to (n, 1, 32, 32) float32 in [0, 1].

    Accepts (n, 32, 32), (n, 1, 32, 32), or flattened (n, 1024) arrays.
    """
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim == 2 and X.shape[1] == _IMG * _IMG:
        X = X.reshape(-1, 1, _IMG, _IMG)
    elif X.ndim == 3 and X.shape[1:] == (_IMG, _IMG):
        X = X[:, None]
    elif X.ndim == 4 and X.shape[1:] == (1, _IMG, _IMG):
        pass
    else:
        raise ValueError(
            f"expected images shaped (n, {_IMG}, {_IMG}), (n, 1, {_IMG}, {_IMG}) "
            f"or (n, {_IMG * _IMG}), got {X.shape}"
        )
    if X.shape[0] == 0:
        raise ValueError("need at least one image")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


class GlyphClassifier(ClassifierMixin, BaseEstimator):
    """Three-class CNN handwriting classifier with a sklearn interface.

    Parameters mirror the engine's training defaults; ``augment`` switches
    on the rotation/zoom/noise pipeline during fit.  Fitting is fully
    deterministic given ``random_state``.
    """

    def __init__(
        self,
        epochs: int = 20,
        batch_size: int = 64,
        lr: float = 1e-3,
        weight_decay: float = 0.01,
        dropout: float = 0.2,
        augment: bool = False,
        random_state: int = 0,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.augment = augment
        self.random_state = random_state

    def fit(self, X, y):
        X = check_image_batch(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
        self.classes_ = np.unique(y)
        if len(self.classes_) != 3:
            raise ValueError(
                f"this classifier is three-class; got {len(self.classes_)} classes"
            )
        encoded = np.searchsorted(self.classes_, y)
        samples = [
            Sample(Tensor(X[i]), int(encoded[i]), f"array:{i}")
            for i in range(X.shape[0])
        ]
        cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            seed=self.random_state,
        )
        model_config = replace(mv3_mini_config(), dropout_p=self.dropout)
        augment_cfg = AugmentConfig(seed=self.random_state) if self.augment else None
        self.model_, self.opt_state_, self.history_ = fit_model(
            samples, model_config, cfg, augment_cfg=augment_cfg
        )
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_image_batch(X)
        self.model_.eval()
        probs = []
        for start in range(0, X.shape[0], 256):
            logits = self.model_.forward(Tensor(X[start : start + 256]))
            probs.append(softmax(logits).data)
        return np.concatenate(probs, axis=0)

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def explain(self, X, target_class: int | None = None) -> list[Heatmap]:
        """Grad-CAM heatmap per image, targeting the predicted class by default."""
        check_is_fitted(self, "model_")
        X = check_image_batch(X)
        preds = self.predict_proba(X).argmax(axis=1)
        heatmaps = []
        for i in range(X.shape[0]):
            target = int(preds[i]) if target_class is None else int(target_class)
            sample = Sample(Tensor(X[i]), target, f"array:{i}")
            heatmaps.append(grad_cam(self.model_, sample, target))
        return heatmaps


class ImagePreprocessor(TransformerMixin, BaseEstimator):
    """Stateless transformer: raw 8-bit pixel grids -> (n, 1, 32, 32) floats."""

    def fit(self, X, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        out = [preprocess(np.asarray(img)).data for img in X]
        if not out:
            raise ValueError("need at least one image")
        return np.stack(out)
