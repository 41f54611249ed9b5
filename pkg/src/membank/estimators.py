"""scikit-learn compatible wrappers.

``MemoryBankEnhancer`` accumulates features with ``fit``/``partial_fit``
and enhances queries in ``transform``; ``CosineNearestCentroid`` is the
evaluation classifier used by the quality proxy.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .geo import GeoParams, stack_batch
from .memory_bank import MemoryBank, SamplingStrategy, Scope, UpdatePolicy
from .types import seeded_rng


def check_scores(scores, n_samples: int) -> np.ndarray:
    """Default to all-ones; otherwise require ``n_samples`` values in [0, 1]."""
    if scores is None:
        return np.ones(n_samples)
    scores = check_array(scores, ensure_2d=False, dtype=np.float64)
    if scores.shape != (n_samples,):
        raise ValueError(f"expected {n_samples} scores, got shape {scores.shape}")
    if ((scores < 0) | (scores > 1)).any():
        raise ValueError("scores must lie in [0, 1]")
    return scores


def cosine_similarity_rows(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Row-wise cosine between matching rows of ``X`` and ``Y``."""
    num = (X * Y).sum(axis=1)
    return num / (np.linalg.norm(X, axis=1) * np.linalg.norm(Y, axis=1))


class CosineNearestCentroid(ClassifierMixin, BaseEstimator):
    """Assign each sample to the class centroid with the highest cosine similarity."""

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, inv = np.unique(y, return_inverse=True)
        self.centroids_ = np.stack([X[inv == i].mean(axis=0) for i in range(len(self.classes_))])
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "centroids_")
        X = check_array(X)
        c = self.centroids_ / np.linalg.norm(self.centroids_, axis=1, keepdims=True)
        return (X @ c.T) / np.linalg.norm(X, axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def mean_cosine(self, X, y) -> float:
        """Mean cosine between each sample and its true class centroid."""
        check_is_fitted(self, "centroids_")
        X, y = check_X_y(X, y)
        idx = np.searchsorted(self.classes_, y)
        return float(cosine_similarity_rows(X, self.centroids_[idx]).mean())


class MemoryBankEnhancer(TransformerMixin, BaseEstimator):
    """Enhance query features against a sampled memory of past features.

    Parameters
    ----------
    n_mem : int
        Bank capacity.
    n_key : int
        Keys sampled per ``transform`` call.
    strategy : {"random", "score", "freq"}
        Key-set sampling strategy.
    update : str
        ``"frame"`` or ``"feature[:strategy]"`` eviction policy.
    scope : {"video", "class"}
    n_heads : int
    depth : int
        Number of stacked enhancement stages applied in ``transform``.
    geo_params : GeoParams, optional
        Fixed weights; otherwise drawn from ``random_state`` at fit time.
    random_state : int
    """

    def __init__(
        self,
        n_mem=24000,
        n_key=2000,
        strategy="random",
        update="feature",
        scope="video",
        n_heads=16,
        depth=1,
        geo_params=None,
        random_state=0,
    ):
        self.n_mem = n_mem
        self.n_key = n_key
        self.strategy = strategy
        self.update = update
        self.scope = scope
        self.n_heads = n_heads
        self.depth = depth
        self.geo_params = geo_params
        self.random_state = random_state

    def _init_state(self, n_features: int) -> None:
        self.rng_ = seeded_rng(self.random_state)
        if self.geo_params is not None:
            if self.geo_params.d != n_features:
                raise ValueError(f"geo_params expect {self.geo_params.d} features, got {n_features}")
            self.params_ = self.geo_params
        else:
            self.params_ = GeoParams.random(n_features, self.n_heads, self.rng_)
        self.bank_ = MemoryBank(
            capacity=self.n_mem,
            n_key=self.n_key,
            dim=n_features,
            strategy=SamplingStrategy(self.strategy),
            update_policy=UpdatePolicy.parse(self.update),
            scope=Scope(self.scope),
        )
        self.n_features_in_ = n_features
        self._frame = 0

    def fit(self, X, y=None, scores=None):
        """Reset the bank and store ``X`` as one frame; ``y`` gives class ids."""
        X = check_array(X)
        self._init_state(X.shape[1])
        return self.partial_fit(X, y, scores=scores)

    def partial_fit(self, X, y=None, scores=None, frame_index=None):
        """Insert ``X`` as the next frame (or ``frame_index``)."""
        X = check_array(X)
        if not hasattr(self, "bank_"):
            self._init_state(X.shape[1])
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        scores = check_scores(scores, X.shape[0])
        classes = None if y is None else np.asarray(y, dtype=np.int64)
        frame = self._frame if frame_index is None else int(frame_index)
        self.bank_.insert_arrays(X, scores, frame, self.rng_, class_ids=classes)
        self._frame = frame + 1
        return self

    def transform(self, X):
        check_is_fitted(self, "bank_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        self.last_key_set_ = self.bank_.construct_key_set(self.rng_)
        return stack_batch(X, self.last_key_set_, self.params_, self.depth)

    def end_video(self):
        check_is_fitted(self, "bank_")
        self.bank_.clear()
        self._frame = 0
        return self
