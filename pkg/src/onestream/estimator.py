"""Scikit-learn style facade over the tracker.

`fit` trains on a list of tracklets (each a list of TrackletFrame or
(points, box) pairs), `predict` runs one-pass tracking, and `score` reports
the mean Success AUC / 100. Parameters follow the get_params/set_params
protocol, so the estimator clones and grid-searches like any sklearn
component.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import metrics, pipeline, tensor as T
from .config import TrackerConfig
from .validation import check_tracklet


class PointCloudTracker(BaseEstimator):
    def __init__(self, config=None, epochs=None, seed=0, precision="f64"):
        self.config = config
        self.epochs = epochs
        self.seed = seed
        self.precision = precision

    def _config(self):
        cfg = self.config if self.config is not None else TrackerConfig()
        cfg.seed = self.seed
        return cfg

    def fit(self, X, y=None):
        """Train on tracklets; y is ignored (boxes live in the frames)."""
        T.set_default_dtype(self.precision)
        tracklets = [check_tracklet(tr, require_first_box=True) for tr in X]
        self.config_ = self._config()
        self.model_, self.loss_records_ = pipeline.train(
            tracklets, self.config_, epochs=self.epochs)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this PointCloudTracker instance is not fitted yet")

    def predict(self, X):
        """Per-tracklet arrays of (T, 7) box parameters."""
        self._require_fitted()
        T.set_default_dtype(self.precision)
        out = []
        for i, tr in enumerate(X):
            frames = check_tracklet(tr, require_first_box=True)
            result = pipeline.track(frames, self.config_, self.model_, seed=i)
            out.append(np.stack([b.to_array() for b in result.boxes]))
        return out

    def score(self, X, y=None):
        """Mean Success AUC over the tracklets, scaled to [0, 1]."""
        self._require_fitted()
        T.set_default_dtype(self.precision)
        scores = []
        for i, tr in enumerate(X):
            frames = check_tracklet(tr, require_first_box=True)
            result = pipeline.track(frames, self.config_, self.model_, seed=i)
            ious, _ = pipeline.evaluate(result, frames)
            scores.append(metrics.success_auc(ious))
        return float(np.mean(scores)) / 100.0
