"""Domain types shared by the memory bank, GEO, and pipeline modules."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

FeatureVector = NDArray[np.float64]


class FeatureError(ValueError):
    """Base class for rejected feature payloads."""


class EmptyVector(FeatureError):
    pass


class NonFinite(FeatureError):
    pass


class InvalidScore(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class Level(str, Enum):
    PIXEL = "pixel"
    INSTANCE = "instance"


def new_feature(values: Iterable[float]) -> FeatureVector:
    """Validate ``values`` and return a read-only float64 vector.

    Raises
    ------
    EmptyVector
        If ``values`` has no entries.
    NonFinite
        If any entry is NaN or infinite.
    """
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size == 0:
        raise EmptyVector("feature vector must be non-empty")
    bad = ~np.isfinite(arr)
    if bad.any():
        raise NonFinite(f"non-finite entry at index {int(np.flatnonzero(bad)[0])}")
    arr.flags.writeable = False
    return arr


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; equal seeds replay identical streams on every platform."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass(frozen=True, eq=False)
class ScoredFeature:
    """A feature vector with its confidence score and provenance."""

    feature: FeatureVector
    score: float
    frame_index: int
    class_id: int = 0
    level: Level = Level.INSTANCE

    def __post_init__(self):
        object.__setattr__(self, "feature", new_feature(self.feature))
        score = float(self.score)
        if not 0.0 <= score <= 1.0:
            raise InvalidScore(f"score must lie in [0, 1], got {self.score}")
        object.__setattr__(self, "score", score)
        if int(self.frame_index) < 0:
            raise ValueError("frame_index must be non-negative")
        if int(self.class_id) < 0:
            raise ValueError("class_id must be non-negative")
        object.__setattr__(self, "frame_index", int(self.frame_index))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "level", Level(self.level))

    @property
    def dim(self) -> int:
        return self.feature.shape[0]

    def with_feature(self, values) -> "ScoredFeature":
        return replace(self, feature=values)


def _readonly(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class KeySet:
    """Features drawn from a memory bank, stored column-wise.

    ``features`` is an ``(n, d)`` matrix; the other arrays are parallel to
    its rows. ``slot_ids`` are unique since keys are drawn without
    replacement.
    """

    features: np.ndarray
    scores: np.ndarray
    frame_indices: np.ndarray
    class_ids: np.ndarray
    slot_ids: np.ndarray
    epochs: np.ndarray = field(default=None)
    level: Level = Level.INSTANCE

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DimensionMismatch("key features must be a 2-D matrix")
        n = feats.shape[0]
        feats.flags.writeable = False
        object.__setattr__(self, "features", feats)
        for name, dtype in (
            ("scores", np.float64),
            ("frame_indices", np.int64),
            ("class_ids", np.int64),
            ("slot_ids", np.int64),
        ):
            arr = _readonly(getattr(self, name), dtype)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have length {n}")
            object.__setattr__(self, name, arr)
        epochs = np.zeros(n, dtype=np.int64) if self.epochs is None else self.epochs
        object.__setattr__(self, "epochs", _readonly(epochs, np.int64))
        if np.unique(self.slot_ids).size != n:
            raise ValueError("duplicate slot ids in key set")

    @classmethod
    def empty(cls, dim: int, level: Level = Level.INSTANCE) -> "KeySet":
        z = np.zeros(0)
        return cls(np.zeros((0, dim)), z, z, z, z, level=level)

    @classmethod
    def from_features(
        cls, items: Sequence[ScoredFeature], slot_ids: Sequence[int] | None = None
    ) -> "KeySet":
        if not items:
            raise ValueError("use KeySet.empty for an empty key set")
        if slot_ids is None:
            slot_ids = range(len(items))
        return cls(
            features=np.stack([f.feature for f in items]),
            scores=[f.score for f in items],
            frame_indices=[f.frame_index for f in items],
            class_ids=[f.class_id for f in items],
            slot_ids=list(slot_ids),
            level=items[0].level,
        )

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def source_slots(self) -> np.ndarray:
        return self.slot_ids

    @property
    def elements(self) -> tuple[ScoredFeature, ...]:
        return tuple(
            ScoredFeature(
                self.features[i],
                self.scores[i],
                self.frame_indices[i],
                self.class_ids[i],
                self.level,
            )
            for i in range(len(self))
        )

    def permuted(self, order) -> "KeySet":
        order = np.asarray(order)
        return KeySet(
            self.features[order],
            self.scores[order],
            self.frame_indices[order],
            self.class_ids[order],
            self.slot_ids[order],
            self.epochs[order],
            self.level,
        )


def frame_entropy(frame_keys) -> float:
    """Shannon entropy (nats) of the empirical distribution of ``frame_keys``.

    ``frame_keys`` may be a 1-D array of frame indices or a 2-D array whose
    rows identify a frame, e.g. ``(epoch, frame_index)`` pairs.
    """
    arr = np.asarray(frame_keys)
    if arr.size == 0:
        return 0.0
    if arr.ndim > 1:
        # row-wise unique is slow; rank-encode each column into one int key
        arr = np.ravel_multi_index(
            tuple(np.unique(col, return_inverse=True)[1] for col in arr.T),
            tuple(int(np.unique(col).size) for col in arr.T),
        )
    _, counts = np.unique(arr, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum()) + 0.0
