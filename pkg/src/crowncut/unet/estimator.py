"""scikit-learn style front-ends for the float and quantized networks."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ..validation import check_images, check_masks
from .model import UNetConfig, build_model, forward, predict_proba as _proba
from .train import Dataset, TrainingConfig, fit_model


class UNetSegmenter(ClassifierMixin, BaseEstimator):
    """Pixel classifier: ``X`` is ``(N, C, S, S)`` in [0, 1], ``y`` is ``(N, S, S)`` of 0/1.

    ``fit`` trains on everything it is given; hold-out splitting is left to
    the caller (see :func:`crowncut.unet.train.train` for the split variant).
    """

    def __init__(self, depth=4, base_channels=64, epochs=70, learning_rate=1e-3, batch_size=4, random_state=0,
                 verbose=False):
        self.depth = depth
        self.base_channels = base_channels
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state
        self.verbose = verbose

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, n=X.shape[0], size=X.shape[2])
        cfg = UNetConfig(in_channels=X.shape[1], depth=self.depth, base_channels=self.base_channels,
                         input_size=X.shape[2])
        tcfg = TrainingConfig(epochs=self.epochs, learning_rate=self.learning_rate, batch_size=self.batch_size,
                              rng_seed=self.random_state)
        self.model_ = build_model(cfg, seed=self.random_state)
        cb = (lambda rec: print(f"epoch {rec.epoch}: loss {rec.train_loss:.4f}")) if self.verbose else None
        self.trace_ = fit_model(self.model_, Dataset(X, y), tcfg, callback=cb)
        self.classes_ = np.arange(cfg.num_classes)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model) -> "UNetSegmenter":
        """Wrap an already trained :class:`UNetModel`."""
        est = cls(depth=model.config.depth, base_channels=model.config.base_channels)
        est.model_ = model
        est.trace_ = []
        est.classes_ = np.arange(model.config.num_classes)
        est.n_features_in_ = model.config.in_channels
        return est

    def _check(self, X):
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        return check_images(X, cfg.in_channels, cfg.input_size)

    def decision_function(self, X):
        """Logits ``(N, classes, S, S)``."""
        X = self._check(X)
        return forward(self.model_, X)

    def predict_proba(self, X):
        X = self._check(X)
        return _proba(self.model_, X)

    def predict(self, X):
        lg = self.decision_function(X)
        return (lg[:, 1] > lg[:, 0]).astype(np.uint8)

    def score(self, X, y, sample_weight=None):
        """Mean pixel accuracy."""
        pred = self.predict(X)
        y = check_masks(y, n=pred.shape[0], size=pred.shape[1])
        return float(np.mean(pred == y))

    def quantize(self, X_calib, n=10) -> "QuantizedSegmenter":
        """Calibrate on up to ``n`` images and return the integer-path estimator."""
        from ..quant import calibrate, quantize_model
        X_calib = self._check(X_calib)
        q = QuantizedSegmenter()
        q.qmodel_ = quantize_model(self.model_, calibrate(self.model_, X_calib, n=min(n, X_calib.shape[0])))
        q.classes_ = self.classes_
        q.n_features_in_ = self.n_features_in_
        return q


class QuantizedSegmenter(ClassifierMixin, BaseEstimator):
    """Inference-only estimator over a :class:`~crowncut.quant.QuantizedUNet`."""

    def __init__(self, threads=1):
        self.threads = threads

    @classmethod
    def from_qmodel(cls, qmodel, threads=1) -> "QuantizedSegmenter":
        est = cls(threads=threads)
        est.qmodel_ = qmodel
        est.classes_ = np.arange(qmodel.config.num_classes)
        est.n_features_in_ = qmodel.config.in_channels
        return est

    def fit(self, X=None, y=None):
        check_is_fitted(self, "qmodel_")
        return self

    def _check(self, X):
        check_is_fitted(self, "qmodel_")
        cfg = self.qmodel_.config
        return check_images(X, cfg.in_channels, cfg.input_size)

    def decision_function(self, X):
        from ..quant import int_forward
        X = self._check(X)
        return int_forward(self.qmodel_, X, self.threads)

    def predict(self, X):
        from ..quant import int_predict
        X = self._check(X)
        return int_predict(self.qmodel_, X, self.threads)

    def score(self, X, y, sample_weight=None):
        pred = self.predict(X)
        y = check_masks(y, n=pred.shape[0], size=pred.shape[1])
        return float(np.mean(pred == y))
