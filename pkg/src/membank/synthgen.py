"""Seeded synthetic feature streams standing in for detector features.

Object ``i`` in a frame belongs to class ``i % n_classes`` and keeps its
identity across frames. Its feature is its class centroid plus noise that
follows a stationary AR(1) process::

    z_0 = eps_0
    z_t = rho * z_{t-1} + sqrt(1 - rho**2) * eps_t
    x_t = centroid + sigma * z_t

so ``rho`` sets how similar adjacent frames are while the per-frame noise
level (and hence the expected norm) stays constant over time.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .pipeline import FrameFeatures
from .types import Level, ScoredFeature


class ScoreModel(str, Enum):
    UNIFORM = "uniform"
    FRAME_CORRELATED = "frame"


@dataclass(frozen=True)
class StreamSpec:
    n_frames: int = 50
    d: int = 64
    n_classes: int = 10
    pixel_per_frame: int = 100
    instance_per_frame: int = 30
    noise_sigma: float = 0.5
    redundancy_rho: float = 0.9
    score_model: ScoreModel = ScoreModel.UNIFORM
    score_spread: float = 0.05
    centroid_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "score_model", ScoreModel(self.score_model))
        if self.n_frames < 1 or self.d < 1 or self.n_classes < 1:
            raise ValueError("n_frames, d and n_classes must be positive")
        if self.pixel_per_frame < 0 or self.instance_per_frame < 0:
            raise ValueError("per-frame feature counts must be non-negative")
        if not 0.0 <= self.redundancy_rho <= 1.0:
            raise ValueError("redundancy_rho must lie in [0, 1]")
        if self.noise_sigma < 0 or self.score_spread < 0 or self.centroid_scale <= 0:
            raise ValueError("noise_sigma and score_spread must be >= 0, centroid_scale > 0")

    def _streams(self):
        # centroids, pixel noise, instance noise, scores, eval queries
        return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(self.seed).spawn(5)]


def centroids(spec: StreamSpec) -> np.ndarray:
    """``(n_classes, d)`` class centres: scaled standard-normal draws."""
    c = spec.centroid_scale * spec._streams()[0].standard_normal((spec.n_classes, spec.d))
    if spec.n_classes > 1:
        gaps = np.linalg.norm(c[:, None] - c[None], axis=-1)[np.triu_indices(spec.n_classes, 1)]
        if gaps.min() == 0:
            raise ValueError("degenerate centroids; pick another seed")
    return c


def _ar_noise(rng, n_frames, n_obj, d, rho) -> np.ndarray:
    eps = rng.standard_normal((n_frames, n_obj, d))
    z = np.empty_like(eps)
    z[0] = eps[0]
    innov = np.sqrt(1.0 - rho * rho)
    for t in range(1, n_frames):
        z[t] = rho * z[t - 1] + innov * eps[t]
    return z


def _scores(spec: StreamSpec, rng, n_obj: int, base: np.ndarray) -> np.ndarray:
    if spec.score_model is ScoreModel.UNIFORM:
        return rng.random((spec.n_frames, n_obj))
    jitter = spec.score_spread * rng.uniform(-1.0, 1.0, (spec.n_frames, n_obj))
    return np.clip(base[:, None] + jitter, 0.0, 1.0)


def generate_arrays(spec: StreamSpec) -> dict:
    """Raw arrays behind :func:`generate_stream`.

    Keys: ``pixel``/``instance`` ``(T, n, d)`` features, ``*_scores`` ``(T, n)``,
    ``*_classes`` ``(n,)`` and ``centroids``.
    """
    _, pix_rng, ins_rng, score_rng, _ = spec._streams()
    cent = centroids(spec)
    base = score_rng.random(spec.n_frames)
    out = {"centroids": cent}
    for name, rng, n_obj in (
        ("pixel", pix_rng, spec.pixel_per_frame),
        ("instance", ins_rng, spec.instance_per_frame),
    ):
        classes = np.arange(n_obj) % spec.n_classes
        noise = _ar_noise(rng, spec.n_frames, n_obj, spec.d, spec.redundancy_rho)
        out[name] = cent[classes][None] + spec.noise_sigma * noise
        out[f"{name}_scores"] = _scores(spec, score_rng, n_obj, base)
        out[f"{name}_classes"] = classes
    return out


def generate_stream(spec: StreamSpec) -> list[FrameFeatures]:
    arrs = generate_arrays(spec)
    frames = []
    for t in range(spec.n_frames):
        levels = {}
        for name, level in (("pixel", Level.PIXEL), ("instance", Level.INSTANCE)):
            feats, scores, classes = arrs[name][t], arrs[f"{name}_scores"][t], arrs[f"{name}_classes"]
            levels[name] = [
                ScoredFeature(feats[i], scores[i], t, int(classes[i]), level) for i in range(len(classes))
            ]
        frames.append(FrameFeatures(t, levels["pixel"], levels["instance"]))
    return frames


def labeled_eval_set(
    spec: StreamSpec, n_queries: int, query_sigma: float
) -> tuple[list[ScoredFeature], np.ndarray]:
    """Noisy copies of the class centroids with their generating labels."""
    if query_sigma < 0:
        raise ValueError("query_sigma must be non-negative")
    rng = spec._streams()[4]
    cent = centroids(spec)
    labels = rng.integers(0, spec.n_classes, size=n_queries)
    x = cent[labels] + query_sigma * rng.standard_normal((n_queries, spec.d))
    queries = [ScoredFeature(x[i], 1.0, 0, int(labels[i])) for i in range(n_queries)]
    return queries, labels
