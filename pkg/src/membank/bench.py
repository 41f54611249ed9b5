"""Desk-scale experiments: key-set cost versus memory size, key-set size
sweep, update-policy visible frames, key-set diversity and a
nearest-centroid quality proxy. Each ``run_*`` function returns a list of
row dicts whose keys are the experiment's fixed CSV columns.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from threadpoolctl import threadpool_limits

from .estimators import CosineNearestCentroid
from .geo import GeoParams, enhance_batch
from .memory_bank import MemoryBank, SamplingStrategy, Scope, UpdatePolicy
from .synthgen import ScoreModel, StreamSpec, centroids, generate_arrays, labeled_eval_set
from .types import KeySet, frame_entropy, seeded_rng

logger = logging.getLogger(__name__)


class Experiment(str, Enum):
    RUNTIME_VS_NM = "runtime-vs-nm"
    NK_SWEEP = "nk-sweep"
    UPDATE_POLICY = "update-policy"
    DIVERSITY = "diversity"
    QUALITY_PROXY = "quality-proxy"
    RUN_VIDEO = "run-video"


DEFAULT_GRIDS = {
    Experiment.RUNTIME_VS_NM: (4000, 8000, 16000, 32000, 64000),
    Experiment.NK_SWEEP: (32, 128, 512, 2048),
    Experiment.UPDATE_POLICY: ("frame", "feature:random"),
    Experiment.DIVERSITY: ("random", "score", "freq"),
    Experiment.QUALITY_PROXY: (256,),
    Experiment.RUN_VIDEO: (0,),
}

COLUMNS = {
    Experiment.RUNTIME_VS_NM: ("mode", "n_m", "n_k", "keys_used", "median_ns", "p90_ns", "reps", "threads", "status"),
    Experiment.NK_SWEEP: (
        "n_k", "n_m", "median_ns", "p90_ns", "reps",
        "raw_cosine", "enhanced_cosine", "raw_accuracy", "enhanced_accuracy",
    ),
    Experiment.UPDATE_POLICY: ("policy", "scope", "video", "frame_t", "event", "bank_size", "distinct_frames"),
    Experiment.DIVERSITY: ("strategy", "mean_entropy", "std", "trials"),
    Experiment.QUALITY_PROXY: ("variant", "n_k", "query_sigma", "mean_cosine", "accuracy"),
}


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment run.

    ``dim``/``heads``/``n_queries`` size the timing runs; the quality proxy
    uses ``stream.d`` and ``quality_heads`` with prescribed weights.
    """

    experiment: Experiment
    stream: StreamSpec = field(default_factory=StreamSpec)
    grid: tuple = ()
    repetitions: int = 15
    concat_repetitions: int | None = 3
    seed: int = 0
    out: str | None = None
    dim: int = 256
    heads: int = 8
    n_mem: int = 24000
    n_key: int = 256
    n_queries: int = 300
    strategy: SamplingStrategy = SamplingStrategy.RANDOM
    update: UpdatePolicy = field(default_factory=UpdatePolicy.feature_wise)
    scope: Scope = Scope.VIDEO
    warmup: int = 1
    threads: int = 1
    mem_budget_mb: float = 2048.0
    per_frame: int = 50
    n_frames: int | None = None
    n_videos: int = 2
    quality_heads: int = 4
    qk_scale: float = 2.0
    alpha: float = 0.5
    query_sigma: float = 0.5
    exemplars_per_class: int = 100
    n_eval: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "experiment", Experiment(self.experiment))
        object.__setattr__(self, "strategy", SamplingStrategy(self.strategy))
        object.__setattr__(self, "scope", Scope(self.scope))
        if not self.grid:
            object.__setattr__(self, "grid", DEFAULT_GRIDS[self.experiment])
        object.__setattr__(self, "grid", tuple(self.grid))
        if self.repetitions < 1 or (self.concat_repetitions is not None and self.concat_repetitions < 1):
            raise ValueError("repetitions must be >= 1")


def to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def time_call(fn, reps: int, warmup: int = 1) -> np.ndarray:
    """Wall-clock ns for ``reps`` calls of ``fn`` after ``warmup`` discarded calls."""
    return time_interleaved([fn], reps, warmup)[:, 0]


def time_interleaved(fns, reps: int, warmup: int = 1) -> np.ndarray:
    """Time each callable once per round, round-robin, for ``reps`` rounds.

    Interleaving spreads slow drift of the host (frequency scaling, noisy
    neighbours) evenly over the compared configurations. Returns a
    ``(reps, len(fns))`` array of ns.
    """
    for _ in range(warmup):
        for fn in fns:
            fn()
    out = np.empty((reps, len(fns)), dtype=np.int64)
    for r in range(reps):
        for j, fn in enumerate(fns):
            t0 = time.perf_counter_ns()
            fn()
            out[r, j] = time.perf_counter_ns() - t0
    return out


def _summary(times: np.ndarray) -> dict:
    return {"median_ns": int(np.median(times)), "p90_ns": int(np.percentile(times, 90)), "reps": len(times)}


def _filled_bank(n_m: int, spec: ExperimentSpec, rng) -> MemoryBank:
    bank = MemoryBank(capacity=n_m, n_key=spec.n_key, dim=spec.dim, strategy=spec.strategy)
    bank.insert_arrays(rng.standard_normal((n_m, spec.dim)), rng.random(n_m), 0, rng)
    return bank


def concat_bytes(n_m: int, dim: int) -> int:
    """Working set of a concatenated key set: gathered keys plus key/value projections."""
    return 3 * n_m * dim * 8


def run_runtime_vs_nm(spec: ExperimentSpec) -> list[dict]:
    """Median enhancement latency for sampled vs concatenated key sets across N_m."""
    rng = seeded_rng(spec.seed)
    params = GeoParams.random(spec.dim, spec.heads, rng)
    queries = rng.standard_normal((spec.n_queries, spec.dim))
    budget = spec.mem_budget_mb * 2**20
    grid = [int(n) for n in spec.grid]
    banks = [_filled_bank(n_m, spec, rng) for n_m in grid]
    fits = [concat_bytes(n_m, spec.dim) <= budget for n_m in grid]

    def sampled(bank):
        return lambda: enhance_batch(queries, bank.construct_key_set(rng), params)

    def concatenated(bank):
        return lambda: enhance_batch(queries, bank.concat_key_set(), params)

    with threadpool_limits(spec.threads):
        t_sampled = time_interleaved([sampled(b) for b in banks], spec.repetitions, spec.warmup)
        runnable = [b for b, ok in zip(banks, fits) if ok]
        t_concat = time_interleaved(
            [concatenated(b) for b in runnable], spec.concat_repetitions or spec.repetitions, spec.warmup
        )

    rows = []
    for j, n_m in enumerate(grid):
        base = {"n_m": n_m, "n_k": spec.n_key, "threads": spec.threads}
        rows.append({"mode": "sampling", **base, "keys_used": min(spec.n_key, n_m),
                     **_summary(t_sampled[:, j]), "status": "ok"})
    col = 0
    for n_m, ok in zip(grid, fits):
        base = {"mode": "concatenation", "n_m": n_m, "n_k": spec.n_key, "threads": spec.threads, "keys_used": n_m}
        if ok:
            rows.append({**base, **_summary(t_concat[:, col]), "status": "ok"})
            col += 1
        else:
            rows.append({**base, "median_ns": "", "p90_ns": "", "reps": 0, "status": "OOM"})
    for row in rows:
        if row["status"] == "ok":
            logger.info("%s n_m=%d median=%.2f ms", row["mode"], row["n_m"], row["median_ns"] / 1e6)
    return rows


@dataclass(frozen=True, eq=False)
class QualityResult:
    raw: np.ndarray
    enhanced: np.ndarray
    labels: np.ndarray
    keys: KeySet
    params: GeoParams
    centroids: np.ndarray
    raw_cosine: float
    enhanced_cosine: float
    raw_accuracy: float
    enhanced_accuracy: float


def quality_setup(spec: ExperimentSpec, n_key: int | None = None):
    """Build the centroid-seeded bank, prescribed weights, queries and key set."""
    stream = spec.stream
    cent = centroids(stream)
    n_key = spec.n_key if n_key is None else n_key
    capacity = max(1, stream.n_classes * spec.exemplars_per_class)
    bank = MemoryBank(capacity=capacity, n_key=n_key, dim=stream.d, strategy=spec.strategy)
    if spec.exemplars_per_class:
        labels = np.repeat(np.arange(stream.n_classes), spec.exemplars_per_class)
        bank.insert_arrays(cent[labels], np.ones(labels.size), 0, seeded_rng(spec.seed), class_ids=labels)
    params = GeoParams.identity_slices(stream.d, spec.quality_heads, spec.qk_scale, spec.alpha)
    queries, labels = labeled_eval_set(stream, spec.n_eval, spec.query_sigma)
    raw = np.stack([q.feature for q in queries])
    keys = bank.construct_key_set(seeded_rng(spec.seed + 1))
    return raw, labels, keys, params, cent


def quality_proxy(spec: ExperimentSpec, n_key: int | None = None) -> QualityResult:
    """Nearest-centroid accuracy and mean cosine-to-centroid before and after one GEO stage.

    A single ``enhance_batch`` is used rather than a stacked stage: with
    identity transform weights the stacked form starts with a ReLU that
    would zero the negative coordinates of the signed synthetic features.
    """
    raw, labels, keys, params, cent = quality_setup(spec, n_key)
    enhanced = enhance_batch(raw, keys, params)
    clf = CosineNearestCentroid().fit(cent, np.arange(len(cent)))
    return QualityResult(
        raw=raw,
        enhanced=enhanced,
        labels=labels,
        keys=keys,
        params=params,
        centroids=cent,
        raw_cosine=clf.mean_cosine(raw, labels),
        enhanced_cosine=clf.mean_cosine(enhanced, labels),
        raw_accuracy=float(clf.score(raw, labels)),
        enhanced_accuracy=float(clf.score(enhanced, labels)),
    )


def run_quality_proxy(spec: ExperimentSpec) -> list[dict]:
    rows = []
    for n_key in spec.grid:
        res = quality_proxy(spec, int(n_key))
        for variant, cos, acc in (
            ("raw", res.raw_cosine, res.raw_accuracy),
            ("enhanced", res.enhanced_cosine, res.enhanced_accuracy),
        ):
            rows.append(
                {"variant": variant, "n_k": int(n_key), "query_sigma": spec.query_sigma,
                 "mean_cosine": f"{cos:.12f}", "accuracy": f"{acc:.6f}"}
            )
    return rows


def run_nk_sweep(spec: ExperimentSpec) -> list[dict]:
    """Sampled-mode latency and quality proxy for each key-set size at fixed N_m."""
    rng = seeded_rng(spec.seed)
    params = GeoParams.random(spec.dim, spec.heads, rng)
    queries = rng.standard_normal((spec.n_queries, spec.dim))
    bank = _filled_bank(spec.n_mem, spec, rng)
    grid = [int(n) for n in spec.grid]

    def sampled(n_k):
        def call():
            bank.n_key = n_k
            return enhance_batch(queries, bank.construct_key_set(rng), params)
        return call

    with threadpool_limits(spec.threads):
        times = time_interleaved([sampled(n_k) for n_k in grid], spec.repetitions, spec.warmup)
    rows = []
    for j, n_k in enumerate(grid):
        q = quality_proxy(spec, n_k)
        rows.append(
            {"n_k": n_k, "n_m": spec.n_mem, **_summary(times[:, j]),
             "raw_cosine": f"{q.raw_cosine:.12f}", "enhanced_cosine": f"{q.enhanced_cosine:.12f}",
             "raw_accuracy": f"{q.raw_accuracy:.6f}", "enhanced_accuracy": f"{q.enhanced_accuracy:.6f}"}
        )
    return rows


def diversity_trials(spec: ExperimentSpec) -> dict[str, np.ndarray]:
    """Key-set frame entropy per strategy, one value per repetition.

    Each repetition generates a fresh stream (seed offset by the trial),
    fills a feature-wise/random bank with every instance feature, then
    draws one key set per strategy from the same bank.
    """
    strategies = [SamplingStrategy(s) for s in spec.grid]
    out = {s.value: np.empty(spec.repetitions) for s in strategies}
    for trial in range(spec.repetitions):
        stream = replace(spec.stream, seed=spec.seed + trial, pixel_per_frame=0)
        arrs = generate_arrays(stream)
        rng = seeded_rng(spec.seed + trial)
        bank = MemoryBank(capacity=spec.n_mem, n_key=spec.n_key, dim=stream.d, update_policy=spec.update)
        for t in range(stream.n_frames):
            bank.insert_arrays(arrs["instance"][t], arrs["instance_scores"][t], t, rng)
        for s in strategies:
            bank.strategy = s
            keys = bank.construct_key_set(rng)
            out[s.value][trial] = frame_entropy(keys.frame_indices)
    return out


def run_diversity(spec: ExperimentSpec) -> list[dict]:
    trials = diversity_trials(spec)
    return [
        {"strategy": s, "mean_entropy": f"{v.mean():.12f}", "std": f"{v.std():.12f}", "trials": len(v)}
        for s, v in trials.items()
    ]


def visible_frames(
    n_mem: int,
    per_frame: int,
    n_frames: int,
    policy: UpdatePolicy,
    seed: int,
    scope: Scope = Scope.VIDEO,
    n_videos: int = 1,
    dim: int = 1,
):
    """Simulate ``n_videos`` videos of ``n_frames`` frames; yield one record per event."""
    rng = seeded_rng(seed)
    bank = MemoryBank(capacity=n_mem, n_key=0, dim=dim, update_policy=policy, scope=scope)
    zeros = np.zeros((per_frame, dim))
    for video in range(n_videos):
        for t in range(n_frames):
            bank.insert_arrays(zeros, rng.random(per_frame), t, rng)
            yield {"video": video, "frame_t": t, "event": "insert", "bank_size": len(bank),
                   "distinct_frames": bank.distinct_frames()}
        bank.clear()
        yield {"video": video, "frame_t": n_frames, "event": "clear", "bank_size": len(bank),
               "distinct_frames": bank.distinct_frames()}


def final_visible_frames(n_mem: int, per_frame: int, n_frames: int, policy: UpdatePolicy, seed: int) -> int:
    """Distinct stored frames after ``n_frames`` inserts into one video-wise bank."""
    last = None
    for rec in visible_frames(n_mem, per_frame, n_frames, policy, seed):
        if rec["event"] == "insert":
            last = rec
    return last["distinct_frames"]


def run_update_policy(spec: ExperimentSpec) -> list[dict]:
    n_frames = spec.n_frames or 4 * spec.n_mem // spec.per_frame
    rows = []
    for policy_text in spec.grid:
        policy = UpdatePolicy.parse(policy_text)
        for scope in (Scope.VIDEO, Scope.CLASS):
            for rec in visible_frames(spec.n_mem, spec.per_frame, n_frames, policy, spec.seed, scope, spec.n_videos):
                rows.append({"policy": str(policy), "scope": scope.value, **rec})
    return rows


RUNNERS = {
    Experiment.RUNTIME_VS_NM: run_runtime_vs_nm,
    Experiment.NK_SWEEP: run_nk_sweep,
    Experiment.UPDATE_POLICY: run_update_policy,
    Experiment.DIVERSITY: run_diversity,
    Experiment.QUALITY_PROXY: run_quality_proxy,
}


def run_experiment(spec: ExperimentSpec) -> str:
    """Run ``spec`` and return its CSV text, also writing it to ``spec.out`` when set."""
    rows = RUNNERS[spec.experiment](spec)
    text = to_csv(rows, COLUMNS[spec.experiment])
    if spec.out:
        with open(spec.out, "w", newline="") as fh:
            fh.write(text)
    return text


def diversity_stream(seed: int = 0, n_frames: int = 100, d: int = 16) -> StreamSpec:
    """High-redundancy stream with frame-correlated scores."""
    return StreamSpec(
        n_frames=n_frames,
        d=d,
        pixel_per_frame=0,
        instance_per_frame=50,
        redundancy_rho=0.95,
        score_model=ScoreModel.FRAME_CORRELATED,
        seed=seed,
    )
