"""Bounded feature memory with sampled key sets and feature-wise eviction.

Storage is a set of preallocated column arrays of length ``capacity``;
positions ``[0, size)`` are live. Slot ids are assigned from a monotone
counter at insertion time and never reused, so they double as an
insertion-order key. Positions are not slot ids: eviction fills holes
with incoming rows, so physical order is an implementation detail that
sampling depends on (snapshots preserve it).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .types import (
    DimensionMismatch,
    InvalidScore,
    KeySet,
    Level,
    NonFinite,
    ScoredFeature,
    frame_entropy,
)

logger = logging.getLogger(__name__)

DEFAULT_N_MEM = 24000
DEFAULT_N_KEY = 2000


class SamplingStrategy(str, Enum):
    RANDOM = "random"
    SCORE_RANKING = "score"
    FREQUENCY_GUIDED = "freq"


class Scope(str, Enum):
    VIDEO = "video"
    CLASS = "class"


@dataclass(frozen=True)
class UpdatePolicy:
    """``kind`` is ``"feature"`` (evict single features chosen by
    ``strategy``) or ``"frame"`` (evict whole oldest frames)."""

    kind: str = "feature"
    strategy: SamplingStrategy = SamplingStrategy.RANDOM

    def __post_init__(self):
        if self.kind not in ("feature", "frame"):
            raise ValueError(f"unknown update policy {self.kind!r}")
        object.__setattr__(self, "strategy", SamplingStrategy(self.strategy))

    @classmethod
    def feature_wise(cls, strategy=SamplingStrategy.RANDOM) -> "UpdatePolicy":
        return cls("feature", SamplingStrategy(strategy))

    @classmethod
    def frame_wise(cls) -> "UpdatePolicy":
        return cls("frame")

    def __str__(self) -> str:
        return "frame" if self.kind == "frame" else f"feature:{self.strategy.value}"

    @classmethod
    def parse(cls, text: str) -> "UpdatePolicy":
        kind, _, strategy = text.partition(":")
        if kind == "frame":
            return cls.frame_wise()
        return cls.feature_wise(strategy or SamplingStrategy.RANDOM)


@dataclass(frozen=True)
class EvictionReport:
    count: int
    slots: np.ndarray


@dataclass(frozen=True)
class BankStats:
    size: int
    distinct_frames: int
    frame_entropy: float
    score_histogram: tuple[int, ...]


class BankError(ValueError):
    pass


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def _rank_order(scores, recency, slot_ids) -> np.ndarray:
    """Indices sorted best-first: higher score, then more recent, then larger slot id."""
    return np.lexsort((-slot_ids, -recency, -scores))


def select_indices(
    k: int,
    strategy: SamplingStrategy,
    scores: np.ndarray,
    recency: np.ndarray,
    slot_ids: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Choose ``min(k, n)`` distinct indices into the candidate arrays.

    Random draws a uniform ``k``-subset. ScoreRanking takes the exact top-k
    by score (ties: more recent first, then larger slot id).
    FrequencyGuided weights candidates by ``softmax(scores)`` and samples
    without replacement with exponential keys ``log(u) / p``; taking the
    largest keys is equivalent to ranking by ``u ** (1 / p)`` but does not
    underflow for small ``p``.
    """
    n = scores.shape[0]
    k = min(int(k), n)
    if k <= 0:
        return np.empty(0, dtype=np.intp)
    strategy = SamplingStrategy(strategy)
    if strategy is SamplingStrategy.RANDOM:
        if k == n:
            return np.arange(n)
        return rng.choice(n, size=k, replace=False)
    if strategy is SamplingStrategy.SCORE_RANKING:
        if k == n:
            return np.arange(n)
        # only candidates at or above the k-th best score can be selected
        cutoff = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= cutoff)
        order = _rank_order(scores[cand], recency[cand], slot_ids[cand])
        return cand[order[:k]]
    p = _softmax(scores.astype(np.float64))
    u = 1.0 - rng.random(n)  # (0, 1]
    with np.errstate(divide="ignore"):
        keys = np.log(u) / p
    if k == n:
        return np.arange(n)
    return np.argpartition(-keys, k - 1)[:k]


def eviction_indices(
    count: int,
    strategy: SamplingStrategy,
    scores: np.ndarray,
    recency: np.ndarray,
    slot_ids: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Inverse of :func:`select_indices`: pick ``count`` features to drop.

    Score-guided strategies prefer low scores (ties: oldest first, then
    smaller slot id); FrequencyGuided samples with weights ``softmax(-scores)``.
    """
    strategy = SamplingStrategy(strategy)
    if strategy is SamplingStrategy.RANDOM:
        return select_indices(count, strategy, scores, recency, slot_ids, rng)
    return select_indices(count, strategy, -scores, -recency, -slot_ids, rng)


class MemoryBank:
    """Bounded multiset of scored features.

    Parameters
    ----------
    capacity : int
        Maximum number of stored features (``N_m``).
    n_key : int
        Key-set size (``N_k``) drawn by :meth:`construct_key_set`.
    dim : int, optional
        Feature dimension; inferred from the first insert when omitted.
    strategy : SamplingStrategy
        Key-set construction strategy.
    update_policy : UpdatePolicy
        Eviction behaviour when an insert overflows ``capacity``.
    scope : Scope
        ``VIDEO`` banks are emptied by :meth:`clear`; ``CLASS`` banks persist.
    level : Level, optional
        When set, inserts of features tagged with another level are rejected.
    strict_order : bool
        Reject batches whose frame index precedes a stored one from the
        same video. Offline (shuffled) processing turns this off.
    """

    def __init__(
        self,
        capacity: int = DEFAULT_N_MEM,
        n_key: int = DEFAULT_N_KEY,
        dim: int | None = None,
        strategy: SamplingStrategy = SamplingStrategy.RANDOM,
        update_policy: UpdatePolicy | None = None,
        scope: Scope = Scope.VIDEO,
        level: Level | None = None,
        strict_order: bool = True,
    ):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if n_key < 0:
            raise ValueError("n_key must be non-negative")
        self.capacity = int(capacity)
        self.n_key = int(n_key)
        self.strategy = SamplingStrategy(strategy)
        self.update_policy = update_policy or UpdatePolicy.feature_wise()
        self.scope = Scope(scope)
        self.level = None if level is None else Level(level)
        self.strict_order = strict_order
        self.dim = None
        self._size = 0
        self._next_slot = 0
        self._next_batch = 0
        self._epoch = 0
        self._watermark = -1
        cap = self.capacity
        self._features = np.zeros((0, 0))
        self._scores = np.zeros(cap)
        self._frames = np.zeros(cap, dtype=np.int64)
        self._classes = np.zeros(cap, dtype=np.int64)
        self._slots = np.zeros(cap, dtype=np.int64)
        self._batches = np.zeros(cap, dtype=np.int64)
        self._epochs = np.zeros(cap, dtype=np.int64)
        if dim is not None:
            self._allocate(int(dim))

    def _allocate(self, dim: int) -> None:
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self._features = np.zeros((self.capacity, dim))

    def __len__(self) -> int:
        return self._size

    @property
    def insertion_counter(self) -> int:
        return self._next_slot

    @property
    def epoch(self) -> int:
        return self._epoch

    def slot_ids(self) -> np.ndarray:
        return self._slots[: self._size].copy()

    def frame_keys(self) -> np.ndarray:
        """``(epoch, frame_index)`` rows identifying each stored feature's frame."""
        n = self._size
        return np.stack([self._epochs[:n], self._frames[:n]], axis=1)

    # -- updates ---------------------------------------------------------

    def insert_batch(
        self, features: Sequence[ScoredFeature], rng: np.random.Generator
    ) -> EvictionReport:
        """Store one frame's worth of features, evicting per the update policy."""
        if len(features) == 0:
            return EvictionReport(0, np.empty(0, dtype=np.int64))
        if self.level is not None:
            for f in features:
                if f.level is not self.level:
                    raise BankError(
                        f"{f.level.value}-level feature offered to a {self.level.value}-level bank"
                    )
        frames = {f.frame_index for f in features}
        if len(frames) != 1:
            raise BankError(f"batch mixes frame indices {sorted(frames)}")
        return self.insert_arrays(
            np.stack([f.feature for f in features]),
            np.array([f.score for f in features]),
            frames.pop(),
            rng,
            class_ids=np.array([f.class_id for f in features]),
        )

    def insert_arrays(
        self,
        features: np.ndarray,
        scores: np.ndarray,
        frame_index: int,
        rng: np.random.Generator,
        class_ids: np.ndarray | None = None,
    ) -> EvictionReport:
        """Array form of :meth:`insert_batch` for callers that skip per-feature objects."""
        feats = np.asarray(features, dtype=np.float64)
        scores = np.asarray(scores, dtype=np.float64)
        b = feats.shape[0]
        if feats.ndim != 2 or scores.shape != (b,):
            raise DimensionMismatch("features must be (b, d) with b scores")
        if b == 0:
            return EvictionReport(0, np.empty(0, dtype=np.int64))
        if b > self.capacity:
            raise BankError(f"batch of {b} exceeds capacity {self.capacity}")
        if not np.isfinite(feats).all():
            raise NonFinite("batch contains non-finite feature values")
        if ((scores < 0) | (scores > 1)).any():
            raise InvalidScore("scores must lie in [0, 1]")
        if self.dim is None:
            self._allocate(feats.shape[1])
        elif feats.shape[1] != self.dim:
            raise DimensionMismatch(f"feature dimension {feats.shape[1]} != bank dimension {self.dim}")
        frame_index = int(frame_index)
        if frame_index < 0:
            raise BankError("frame_index must be non-negative")
        if self.strict_order and frame_index < self._watermark:
            raise BankError(
                f"frame {frame_index} precedes stored frame {self._watermark} in the same video"
            )
        classes = np.zeros(b, dtype=np.int64) if class_ids is None else np.asarray(class_ids, dtype=np.int64)

        n = self._size
        new_slots = np.arange(self._next_slot, self._next_slot + b, dtype=np.int64)
        self._next_slot += b
        batch_id = self._next_batch
        self._next_batch += 1
        self._watermark = max(self._watermark, frame_index)

        overflow = n + b - self.capacity
        if overflow > 0:
            evict = self._choose_evictions(overflow, scores, new_slots, batch_id, rng)
        else:
            evict = np.empty(0, dtype=np.intp)
        evicted_slots = np.concatenate([self._slots[:n], new_slots])[evict]

        keep_new = np.ones(b, dtype=bool)
        keep_new[evict[evict >= n] - n] = False
        holes = np.sort(evict[evict < n])
        incoming = np.flatnonzero(keep_new)

        if incoming.size >= holes.size:
            extra = incoming.size - holes.size
            targets = np.concatenate([holes, np.arange(n, n + extra)])
            self._size = n + extra
        else:
            # frame-wise eviction can free more rows than arrive
            self._compact(holes)
            targets = np.arange(self._size, self._size + incoming.size)
            self._size += incoming.size
        cols = (
            (self._features, feats),
            (self._scores, scores),
            (self._frames, frame_index),
            (self._classes, classes),
            (self._slots, new_slots),
            (self._batches, batch_id),
            (self._epochs, self._epoch),
        )
        for store, src in cols:
            store[targets] = src[incoming] if np.ndim(src) else src

        assert self._size <= self.capacity
        return EvictionReport(int(evict.size), np.sort(evicted_slots))

    def _choose_evictions(self, overflow, new_scores, new_slots, batch_id, rng) -> np.ndarray:
        """Indices into (stored rows ++ incoming rows) to drop."""
        n = self._size
        b = new_scores.shape[0]
        if self.update_policy.kind == "frame":
            # drop whole batches, oldest first, until the overflow is covered
            batches = self._batches[:n]
            uniq, counts = np.unique(batches, return_counts=True)
            needed = np.searchsorted(np.cumsum(counts), overflow) + 1
            return np.flatnonzero(np.isin(batches, uniq[:needed]))
        scores = np.concatenate([self._scores[:n], new_scores])
        recency = np.concatenate([self._batches[:n], np.full(b, batch_id)])
        slots = np.concatenate([self._slots[:n], new_slots])
        return np.asarray(
            eviction_indices(overflow, self.update_policy.strategy, scores, recency, slots, rng)
        )

    def _compact(self, holes: np.ndarray) -> None:
        """Fill ``holes`` (sorted positions) by moving rows down from the tail."""
        n = self._size
        new_n = n - holes.size
        dst = holes[holes < new_n]
        tail = np.setdiff1d(np.arange(new_n, n), holes, assume_unique=True)
        for store in (
            self._features,
            self._scores,
            self._frames,
            self._classes,
            self._slots,
            self._batches,
            self._epochs,
        ):
            store[dst] = store[tail]
        self._size = new_n

    def clear(self) -> None:
        """Video boundary: empty a video-wise bank; a class-wise bank keeps its contents."""
        if self.scope is Scope.VIDEO:
            self._size = 0
        self._epoch += 1
        self._watermark = -1

    # -- queries ---------------------------------------------------------

    def _keyset(self, idx: np.ndarray) -> KeySet:
        if self.dim is None:
            return KeySet.empty(1, self.level or Level.INSTANCE)
        idx = idx[np.argsort(self._slots[idx], kind="stable")]
        return KeySet(
            self._features[idx],
            self._scores[idx],
            self._frames[idx],
            self._classes[idx],
            self._slots[idx],
            self._epochs[idx],
            self.level or Level.INSTANCE,
        )

    def construct_key_set(self, rng: np.random.Generator, class_id: int | None = None) -> KeySet:
        """Draw ``min(n_key, size)`` distinct stored features per ``strategy``.

        With ``class_id`` the draw is restricted to that class's partition.
        The bank is not modified. Keys are returned in slot-id order.
        """
        n = self._size
        pool = np.arange(n) if class_id is None else np.flatnonzero(self._classes[:n] == class_id)
        if pool.size == 0 or self.n_key == 0:
            return self._keyset(np.empty(0, dtype=np.intp))
        pick = select_indices(
            self.n_key,
            self.strategy,
            self._scores[pool],
            self._batches[pool],
            self._slots[pool],
            rng,
        )
        return self._keyset(pool[pick])

    def concat_key_set(self) -> KeySet:
        """Every stored feature, in slot-id order."""
        return self._keyset(np.arange(self._size))

    def stats(self, bins: int = 10) -> BankStats:
        n = self._size
        keys = self.frame_keys()
        distinct = self.distinct_frames()
        hist, _ = np.histogram(self._scores[:n], bins=bins, range=(0.0, 1.0))
        return BankStats(n, int(distinct), frame_entropy(keys), tuple(int(c) for c in hist))

    def distinct_frames(self) -> int:
        n = self._size
        # frame indices are non-negative, so (epoch, frame) packs into one key
        codes = self._epochs[:n] * (int(self._frames[:n].max(initial=0)) + 1) + self._frames[:n]
        return int(np.unique(codes).size)

    # -- persistence -----------------------------------------------------

    def header(self) -> dict:
        return {
            "capacity": self.capacity,
            "n_k": self.n_key,
            "strategy": self.strategy.value,
            "update_policy": str(self.update_policy),
            "scope": self.scope.value,
            "dim": self.dim,
            "level": None if self.level is None else self.level.value,
            "strict_order": self.strict_order,
            "next_slot": self._next_slot,
            "next_batch": self._next_batch,
            "epoch": self._epoch,
            "watermark": self._watermark,
        }

    def save(self, path) -> None:
        """JSON-lines snapshot: a header line, then one record per slot in storage order."""
        level = (self.level or Level.INSTANCE).value
        with open(path, "w") as fh:
            fh.write(json.dumps(self.header()) + "\n")
            for i in range(self._size):
                rec = {
                    "slot_id": int(self._slots[i]),
                    "frame_index": int(self._frames[i]),
                    "class_id": int(self._classes[i]),
                    "score": float(self._scores[i]),
                    "level": level,
                    "feature": self._features[i].tolist(),
                    "batch": int(self._batches[i]),
                    "epoch": int(self._epochs[i]),
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "MemoryBank":
        with open(path) as fh:
            lines = [ln for ln in fh if ln.strip()]
        if not lines:
            raise BankError(f"{path}: empty snapshot")
        head = json.loads(lines[0])
        bank = cls(
            capacity=head["capacity"],
            n_key=head["n_k"],
            dim=head.get("dim"),
            strategy=head["strategy"],
            update_policy=UpdatePolicy.parse(head["update_policy"]),
            scope=head["scope"],
            level=head.get("level"),
            strict_order=head.get("strict_order", True),
        )
        records = [json.loads(ln) for ln in lines[1:]]
        if len(records) > bank.capacity:
            raise BankError(f"{path}: {len(records)} records exceed capacity {bank.capacity}")
        if records:
            if bank.dim is None:
                bank._allocate(len(records[0]["feature"]))
            n = len(records)
            bank._features[:n] = [r["feature"] for r in records]
            bank._scores[:n] = [r["score"] for r in records]
            bank._frames[:n] = [r["frame_index"] for r in records]
            bank._classes[:n] = [r["class_id"] for r in records]
            bank._slots[:n] = [r["slot_id"] for r in records]
            bank._batches[:n] = [r.get("batch", r["frame_index"]) for r in records]
            bank._epochs[:n] = [r.get("epoch", 0) for r in records]
            bank._size = n
        bank._next_slot = head.get("next_slot", int(bank._slots[: bank._size].max(initial=-1)) + 1)
        bank._next_batch = head.get("next_batch", int(bank._batches[: bank._size].max(initial=-1)) + 1)
        bank._epoch = head.get("epoch", 0)
        bank._watermark = head.get("watermark", -1)
        return bank
