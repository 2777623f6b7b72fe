"""Estimator-style front end: fit on a labeled series, predict per window.

Follows the fit/predict/score_samples conventions so the detector can drop
into scikit-learn-shaped workflows without importing sklearn itself.
"""

from __future__ import annotations

import numpy as np

from . import encoder as enc
from . import evaluation as ev
from . import objective as obj
from . import pipeline as pl
from . import synthdata as sd


class NotFittedError(RuntimeError):
    pass


def check_series(X, y=None):
    """Validate a (T, D) float series and optional binary labels."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 1:
        raise ValueError(f"expected a (T, D) series with T >= 2, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("series contains non-finite values")
    if y is None:
        return X, np.zeros(X.shape[0], dtype=np.int64)
    y = np.asarray(y)
    if y.shape != (X.shape[0],):
        raise ValueError(f"labels shape {y.shape} does not match T={X.shape[0]}")
    if not np.isin(y, [0, 1]).all():
        raise ValueError("labels must be 0 or 1")
    return X, y.astype(np.int64)


class CopulaDetector:
    """Windowed anomaly detector scored by a latent joint density.

    Parameters mirror TrainConfig; fit slides windows over the series,
    trains the encoder and dependency model end to end, and keeps the
    best-validation-F1 checkpoint plus its decision threshold.
    """

    def __init__(self, window_length=20, stride=10, family="copula",
                 base="student_t", dof=4.0, learn_dof=False,
                 marginal_mode="parametric", margin=1.0, anomaly_weight=1.0,
                 epochs=30, batch_size=64, learning_rate=1e-3,
                 latent_dim=16, model_dim=64, num_layers=2, num_heads=2,
                 baseline=False, val_fraction=0.3, seed=0):
        self.window_length = window_length
        self.stride = stride
        self.family = family
        self.base = base
        self.dof = dof
        self.learn_dof = learn_dof
        self.marginal_mode = marginal_mode
        self.margin = margin
        self.anomaly_weight = anomaly_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.latent_dim = latent_dim
        self.model_dim = model_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.baseline = baseline
        self.val_fraction = val_fraction
        self.seed = seed

    _param_names = ("window_length", "stride", "family", "base", "dof",
                    "learn_dof", "marginal_mode", "margin", "anomaly_weight",
                    "epochs", "batch_size", "learning_rate", "latent_dim",
                    "model_dim", "num_layers", "num_heads", "baseline",
                    "val_fraction", "seed")

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names}

    def set_params(self, **params):
        for name, value in params.items():
            if name not in self._param_names:
                raise ValueError(f"unknown parameter {name!r}")
            setattr(self, name, value)
        return self

    def _train_config(self, input_dim):
        return pl.TrainConfig(
            window_length=self.window_length, stride=self.stride,
            batch_size=self.batch_size, epochs=self.epochs,
            learning_rate=self.learning_rate,
            loss=obj.LossConfig(margin=self.margin,
                                anomaly_weight=self.anomaly_weight),
            encoder=enc.EncoderConfig(
                input_dim=input_dim, model_dim=self.model_dim,
                num_layers=self.num_layers, num_heads=self.num_heads,
                latent_dim=self.latent_dim),
            family=self.family, base=self.base, dof=self.dof,
            learn_dof=self.learn_dof, marginal_mode=self.marginal_mode,
            baseline=self.baseline, seed=self.seed)

    def fit(self, X, y=None):
        X, y = check_series(X, y)
        config = self._train_config(X.shape[1])
        series = sd.LabeledSeries(values=X, labels=y,
                                  events=[(int(s), int(e))
                                          for s, e in ev._event_runs(y)])
        frames = pl.make_frames(series, self.window_length, self.stride)
        if frames.labels.max() == 0:
            # unlabeled data: degrade some windows up front so both the
            # training hinge and validation thresholding have positives
            injected, inj_labels = pl.inject_pseudo_anomalies(
                frames.frames, frames.labels, config.injection_rate,
                self.seed + 7)
            frames = pl.FrameSet(injected, inj_labels, self.stride)
        n = frames.frames.shape[0]
        # shuffle before splitting so both splits see both classes
        order = np.random.default_rng(self.seed + 13).permutation(n)
        cut = max(1, int(round((1.0 - self.val_fraction) * n)))
        tr, va = order[:cut], order[cut:]
        train_fs = pl.FrameSet(frames.frames[tr], frames.labels[tr],
                               self.stride)
        val_fs = pl.FrameSet(frames.frames[va], frames.labels[va],
                             self.stride) if va.size else None
        self.checkpoint_, self.history_ = pl.train(train_fs, val_fs, config)
        self.encoder_config_, self.params_, self.model_ = \
            self.checkpoint_.restore()
        self.threshold_ = self.checkpoint_.threshold
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predicting or scoring")

    def _frames(self, X):
        X, _ = check_series(X)
        series = sd.LabeledSeries(values=X,
                                  labels=np.zeros(X.shape[0], dtype=np.int64),
                                  events=[])
        return pl.make_frames(series, self.window_length, self.stride)

    def score_samples(self, X):
        """Per-window log-density; higher means more normal."""
        self._check_fitted()
        fs = self._frames(X)
        return pl.score_frames(fs.frames, self.params_, self.encoder_config_,
                               self.model_, baseline=self.baseline)

    def decision_function(self, X):
        """Positive for windows above the threshold (normal side)."""
        self._check_fitted()
        if self.threshold_ is None:
            raise NotFittedError("no threshold was selected during fit; "
                                 "provide labeled validation data")
        return self.score_samples(X) - self.threshold_

    def predict(self, X):
        """1 for anomalous windows (score below the fitted threshold)."""
        return (self.decision_function(X) < 0).astype(np.int64)
