"""Per-frame inference loop over a pixel-level and an instance-level bank.

Feature extraction and proposal generation are replaced by a feature
stream (see :mod:`membank.synthgen`); each frame supplies pixel and
instance features directly.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geo import DEFAULT_HEADS, GeoParams, stack_batch
from .memory_bank import (
    DEFAULT_N_KEY,
    DEFAULT_N_MEM,
    MemoryBank,
    SamplingStrategy,
    Scope,
    UpdatePolicy,
)
from .types import DimensionMismatch, Level, ScoredFeature, seeded_rng

U_INS = 75
U_PIX = 100
N_PIX = 1
N_INS = 2
WARMUP_FRAMES = 10

CSV_COLUMNS = ("frame_index", "stage", "latency_ns", "keyset_size", "bank_size", "distinct_frames")


class StreamParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True, eq=False)
class FrameFeatures:
    frame_index: int
    pixel_features: tuple[ScoredFeature, ...] = ()
    instance_features: tuple[ScoredFeature, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "pixel_features", tuple(self.pixel_features))
        object.__setattr__(self, "instance_features", tuple(self.instance_features))
        for level, items in ((Level.PIXEL, self.pixel_features), (Level.INSTANCE, self.instance_features)):
            for f in items:
                if f.frame_index != self.frame_index:
                    raise ValueError(f"feature from frame {f.frame_index} in frame {self.frame_index}")
                if f.level is not level:
                    raise ValueError(f"{f.level.value} feature in the {level.value} list")


@dataclass(frozen=True)
class BankConfig:
    capacity: int = DEFAULT_N_MEM
    n_key: int = DEFAULT_N_KEY
    strategy: SamplingStrategy = SamplingStrategy.RANDOM
    update_policy: UpdatePolicy = field(default_factory=UpdatePolicy.feature_wise)
    scope: Scope = Scope.VIDEO

    def build(self, level: Level, strict_order: bool = True) -> MemoryBank:
        return MemoryBank(
            capacity=self.capacity,
            n_key=self.n_key,
            strategy=self.strategy,
            update_policy=self.update_policy,
            scope=self.scope,
            level=level,
            strict_order=strict_order,
        )


@dataclass(frozen=True)
class PipelineConfig:
    """Settings for :func:`run_video`.

    Missing GEO parameters are drawn from ``seed`` with ``n_heads`` heads
    once the feature dimension is known.
    """

    n_pix: int = N_PIX
    n_ins: int = N_INS
    offline_test: bool = False
    u_pix: int = U_PIX
    u_ins: int = U_INS
    pixel_bank: BankConfig = field(default_factory=BankConfig)
    instance_bank: BankConfig = field(default_factory=BankConfig)
    pixel_geo: GeoParams | None = None
    instance_geo: GeoParams | None = None
    n_heads: int = DEFAULT_HEADS
    seed: int = 0
    timing: bool = True

    def __post_init__(self):
        if self.n_pix < 0 or self.n_ins < 0:
            raise ValueError("enhancement depths must be non-negative")
        if self.u_pix < 0 or self.u_ins < 0:
            raise ValueError("update counts must be non-negative")


@dataclass(frozen=True, eq=False)
class FrameResult:
    frame_index: int
    enhanced_instance: tuple[ScoredFeature, ...]
    enhanced_pixel: tuple[ScoredFeature, ...]
    pixel_enhance_ns: int
    instance_enhance_ns: int
    update_ns: int
    pixel_keyset_size: int
    instance_keyset_size: int
    pixel_bank_size: int
    instance_bank_size: int
    pixel_distinct_frames: int
    instance_distinct_frames: int
    instance_bank_size_after: int = 0
    instance_distinct_frames_after: int = 0


def _as_matrix(items: Sequence[ScoredFeature]) -> np.ndarray:
    return np.stack([f.feature for f in items])


def _enhance(q_set, bank: MemoryBank, params: GeoParams | None, depth: int, rng):
    if depth < 0:
        raise ValueError("depth must be non-negative")
    q_set = list(q_set)
    if depth == 0 or not q_set:
        return q_set, 0
    x = _as_matrix(q_set)
    if bank.dim is not None and bank.dim != x.shape[1]:
        raise DimensionMismatch(f"queries have dimension {x.shape[1]}, bank holds {bank.dim}")
    keys = bank.construct_key_set(rng)
    out = stack_batch(x, keys, params, depth)
    return [f.with_feature(row) for f, row in zip(q_set, out)], len(keys)


def enhance_via_mem_bank(
    q_set: Sequence[ScoredFeature],
    bank: MemoryBank,
    params: GeoParams,
    depth: int,
    rng: np.random.Generator,
) -> list[ScoredFeature]:
    """Draw one key set from ``bank`` and run ``depth`` GEO stages on every query.

    Only feature values change; scores and provenance are carried over.
    """
    return _enhance(q_set, bank, params, depth, rng)[0]


def update_banks(
    bank_pix: MemoryBank,
    bank_ins: MemoryBank,
    enhanced: FrameFeatures,
    config: PipelineConfig,
    rng: np.random.Generator,
) -> None:
    """Insert the top ``u_ins`` instance features by score and ``u_pix`` random pixel features."""
    ins = enhanced.instance_features
    if ins and config.u_ins:
        order = np.argsort([-f.score for f in ins], kind="stable")[: config.u_ins]
        bank_ins.insert_batch([ins[i] for i in order], rng)
    pix = enhanced.pixel_features
    if pix and config.u_pix:
        if len(pix) <= config.u_pix:
            chosen = np.arange(len(pix))
        else:
            chosen = np.sort(rng.choice(len(pix), size=config.u_pix, replace=False))
        bank_pix.insert_batch([pix[i] for i in chosen], rng)


class VideoRunner:
    """Holds both banks and the run's generator across one or more videos.

    Call :meth:`end_video` at a video boundary; video-wise banks are
    emptied, class-wise banks carry over.
    """

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.rng = seeded_rng(config.seed)
        strict = not config.offline_test
        self.bank_pix = config.pixel_bank.build(Level.PIXEL, strict)
        self.bank_ins = config.instance_bank.build(Level.INSTANCE, strict)
        self._geo = {Level.PIXEL: config.pixel_geo, Level.INSTANCE: config.instance_geo}

    def _params(self, level: Level, dim: int) -> GeoParams:
        params = self._geo[level]
        if params is None:
            # independent of the run generator so timing/shuffle draws don't shift weights
            salt = 1 if level is Level.PIXEL else 2
            params = GeoParams.random(dim, self.config.n_heads, seeded_rng((self.config.seed + salt) % 2**64))
            self._geo[level] = params
        if params.d != dim:
            raise DimensionMismatch(f"{level.value} GEO expects d={params.d}, features have d={dim}")
        return params

    def run(self, frames: Sequence[FrameFeatures]) -> list[FrameResult]:
        frames = list(frames)
        if not frames:
            raise ValueError("a video needs at least one frame")
        idx = [f.frame_index for f in frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("frame indices must be strictly increasing")
        cfg = self.config
        if cfg.offline_test:
            frames = [frames[i] for i in self.rng.permutation(len(frames))]
        clock = time.perf_counter_ns if cfg.timing else (lambda: 0)
        results = []
        for frame in frames:
            pix_params = ins_params = None
            if frame.pixel_features and cfg.n_pix:
                pix_params = self._params(Level.PIXEL, frame.pixel_features[0].dim)
            if frame.instance_features and cfg.n_ins:
                ins_params = self._params(Level.INSTANCE, frame.instance_features[0].dim)

            t0 = clock()
            pix, pix_k = _enhance(frame.pixel_features, self.bank_pix, pix_params, cfg.n_pix, self.rng)
            t1 = clock()
            ins, ins_k = _enhance(frame.instance_features, self.bank_ins, ins_params, cfg.n_ins, self.rng)
            t2 = clock()
            pix_stats, ins_stats = self.bank_pix.stats(), self.bank_ins.stats()
            enhanced = FrameFeatures(frame.frame_index, pix, ins)
            t3 = clock()
            update_banks(self.bank_pix, self.bank_ins, enhanced, cfg, self.rng)
            t4 = clock()
            after = self.bank_ins.stats()
            results.append(
                FrameResult(
                    frame_index=frame.frame_index,
                    enhanced_instance=enhanced.instance_features,
                    enhanced_pixel=enhanced.pixel_features,
                    pixel_enhance_ns=t1 - t0,
                    instance_enhance_ns=t2 - t1,
                    update_ns=t4 - t3,
                    pixel_keyset_size=pix_k,
                    instance_keyset_size=ins_k,
                    pixel_bank_size=pix_stats.size,
                    instance_bank_size=ins_stats.size,
                    pixel_distinct_frames=pix_stats.distinct_frames,
                    instance_distinct_frames=ins_stats.distinct_frames,
                    instance_bank_size_after=after.size,
                    instance_distinct_frames_after=after.distinct_frames,
                )
            )
        return results

    def end_video(self) -> None:
        self.bank_pix.clear()
        self.bank_ins.clear()


def run_video(frames: Sequence[FrameFeatures], config: PipelineConfig) -> list[FrameResult]:
    """Process one video; results are in processing order (shuffled when ``offline_test``)."""
    return VideoRunner(config).run(frames)


def median_latencies(results: Sequence[FrameResult], warmup: int = WARMUP_FRAMES) -> dict:
    """Median per-stage latency in ns, skipping the first ``warmup`` frames when possible."""
    kept = results[warmup:] if len(results) > warmup else results
    return {
        stage: float(np.median([getattr(r, f"{stage}_ns") for r in kept]))
        for stage in ("pixel_enhance", "instance_enhance", "update")
    }


# -- I/O ------------------------------------------------------------------


def result_rows(results: Iterable[FrameResult], timing: bool = True) -> list[dict]:
    rows = []
    for r in results:
        for stage, ns, ks, size, distinct in (
            ("pixel_enhance", r.pixel_enhance_ns, r.pixel_keyset_size, r.pixel_bank_size, r.pixel_distinct_frames),
            ("instance_enhance", r.instance_enhance_ns, r.instance_keyset_size, r.instance_bank_size, r.instance_distinct_frames),
            ("update", r.update_ns, 0, r.instance_bank_size_after, r.instance_distinct_frames_after),
        ):
            rows.append(
                dict(
                    frame_index=r.frame_index,
                    stage=stage,
                    latency_ns=ns if timing else "",
                    keyset_size=ks,
                    bank_size=size,
                    distinct_frames=distinct,
                )
            )
    return rows


def results_csv(results: Iterable[FrameResult], timing: bool = True) -> str:
    """One row per (frame, stage).

    Enhancement rows describe the bank they read, before the frame's
    update; the ``update`` row describes the instance bank afterwards.
    """
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(result_rows(results, timing))
    return buf.getvalue()


def _feature_record(f: ScoredFeature) -> dict:
    return {"score": f.score, "class_id": f.class_id, "feature": f.feature.tolist()}


def frame_to_json(frame: FrameFeatures) -> str:
    return json.dumps(
        {
            "frame_index": frame.frame_index,
            "pixel": [_feature_record(f) for f in frame.pixel_features],
            "instance": [_feature_record(f) for f in frame.instance_features],
        }
    )


def write_stream(frames: Iterable[FrameFeatures], path) -> None:
    with open(path, "w") as fh:
        for frame in frames:
            fh.write(frame_to_json(frame) + "\n")


def _parse_features(items, frame_index: int, level: Level, lineno: int) -> list[ScoredFeature]:
    if not isinstance(items, list):
        raise StreamParseError(lineno, f"'{level.value}' must be a list")
    out = []
    for i, item in enumerate(items):
        try:
            out.append(
                ScoredFeature(
                    item["feature"], item["score"], frame_index, item.get("class_id", 0), level
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise StreamParseError(lineno, f"{level.value}[{i}]: {exc}") from None
    return out


def parse_stream(lines: Iterable[str]) -> list[FrameFeatures]:
    """Parse the JSONL stream format; errors carry the 1-based line number."""
    frames = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise StreamParseError(lineno, f"invalid JSON: {exc.msg}") from None
        if not isinstance(rec, dict) or "frame_index" not in rec:
            raise StreamParseError(lineno, "record must be an object with 'frame_index'")
        fi = rec["frame_index"]
        if not isinstance(fi, int) or fi < 0:
            raise StreamParseError(lineno, "frame_index must be a non-negative integer")
        pixel = _parse_features(rec.get("pixel", []), fi, Level.PIXEL, lineno)
        instance = _parse_features(rec.get("instance", []), fi, Level.INSTANCE, lineno)
        frames.append(FrameFeatures(fi, pixel, instance))
    return frames


def read_stream(path) -> list[FrameFeatures]:
    with open(path) as fh:
        return parse_stream(fh)
