"""scikit-learn style wrappers for the array-in stages (plane refit, edge lines).

The per-frame pipeline itself is stateful across frames and stays functional;
these wrappers exist so the point-cloud stages plug into sklearn tooling
(``get_params``/``set_params``, ``clone``, pipelines).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .geometry import Plane
from .processing import extract_edge_lines, refit_plane


def _check_points(X):
    X = check_array(X, dtype=np.float64, ensure_min_samples=3)
    if X.shape[1] != 3:
        raise ValueError(f"expected points with 3 columns, got {X.shape[1]}")
    return X


class PlaneRefitter(TransformerMixin, BaseEstimator):
    """Consensus plane fit.

    ``fit`` learns ``plane_``, ``inlier_ratio_`` and ``inlier_mask_``;
    ``transform`` returns signed point-plane distances; ``predict`` flags
    inliers of the fitted plane.
    """

    def __init__(self, distance_threshold=0.01, iterations=200, random_state=0):
        self.distance_threshold = distance_threshold
        self.iterations = iterations
        self.random_state = random_state

    def fit(self, X, y=None):
        X = _check_points(X)
        if self.distance_threshold <= 0:
            raise ValueError("distance_threshold must be positive")
        plane, ratio, _ = refit_plane(X, self.distance_threshold, self.iterations,
                                      self.random_state)
        self.plane_ = plane
        self.inlier_ratio_ = ratio
        self.inlier_mask_ = np.abs(plane.distance(X)) < self.distance_threshold
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "plane_")
        return self.plane_.distance(_check_points(X)).reshape(-1, 1)

    def predict(self, X):
        return np.abs(self.transform(X)[:, 0]) < self.distance_threshold


class EdgeLineExtractor(BaseEstimator):
    """Sequential consensus edge lines on points of a known plane.

    ``predict`` labels each point with the index of the nearest line within
    ``distance_threshold`` (``-1`` when none is close).
    """

    def __init__(self, plane=None, distance_threshold=0.02, min_inliers=20,
                 max_lines=8, iterations=200, random_state=0):
        self.plane = plane
        self.distance_threshold = distance_threshold
        self.min_inliers = min_inliers
        self.max_lines = max_lines
        self.iterations = iterations
        self.random_state = random_state

    def fit(self, X, y=None):
        X = _check_points(X)
        plane = self.plane
        if plane is None:
            plane = PlaneRefitter(self.distance_threshold, random_state=self.random_state).fit(X).plane_
        elif not isinstance(plane, Plane):
            plane = Plane(plane[:3], plane[3])
        self.plane_ = plane
        self.lines_ = extract_edge_lines(X, plane, self.distance_threshold, self.min_inliers,
                                         self.max_lines, self.random_state, self.iterations)
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "lines_")
        X = _check_points(X)
        dist = np.column_stack([L.distance(X) for L in self.lines_])
        labels = np.argmin(dist, axis=1)
        labels[dist[np.arange(len(X)), labels] >= self.distance_threshold] = -1
        return labels


__all__ = ["PlaneRefitter", "EdgeLineExtractor"]
