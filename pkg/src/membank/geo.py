"""Generalized enhancement operation: multi-head relation attention with a
residual connection, optionally stacked with an affine+ReLU transform
between stages.

The per-query functions (``similarity`` ... ``geo_stack``) define the
contract; ``enhance_batch`` and ``stack_batch`` are the vectorized paths
used by the pipeline and benchmarks. ``geo_reference`` is a loop-only
oracle kept deliberately free of numpy linear algebra.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .types import DimensionMismatch, FeatureVector, KeySet, new_feature

DEFAULT_HEADS = 16
DEFAULT_INSTANCE_DIM = 1024
DEFAULT_PIXEL_DIM = 256

_MAGIC = b"GEO1"
_SCALES = ("head", "full")
# bound on the (heads x queries x keys) logit block held in memory at once
_LOGIT_BLOCK = 1 << 22


def _frozen(a, shape) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if a.shape != shape:
        raise DimensionMismatch(f"expected shape {shape}, got {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("GEO parameters must be finite")
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class GeoParams:
    """Projection and transform weights.

    ``w_q``, ``w_k`` and ``w_v`` have shape ``(n_heads, d_head, d)``; head
    ``m`` uses ``w_q[m]`` etc. ``h_w``/``h_b`` define ``h(x) = relu(h_w @ x + h_b)``.
    ``scale`` picks the similarity denominator: ``"head"`` divides by
    ``sqrt(d_head)``, ``"full"`` by ``sqrt(d)``.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    h_w: np.ndarray
    h_b: np.ndarray
    scale: str = "head"

    def __post_init__(self):
        w_q = np.asarray(self.w_q)
        if w_q.ndim != 3:
            raise DimensionMismatch("w_q must have shape (n_heads, d_head, d)")
        m, dh, d = w_q.shape
        if m < 1 or dh * m != d:
            raise DimensionMismatch(f"d={d} is not n_heads={m} times d_head={dh}")
        for name in ("w_q", "w_k", "w_v"):
            object.__setattr__(self, name, _frozen(getattr(self, name), (m, dh, d)))
        object.__setattr__(self, "h_w", _frozen(self.h_w, (d, d)))
        object.__setattr__(self, "h_b", _frozen(self.h_b, (d,)))
        if self.scale not in _SCALES:
            raise ValueError(f"scale must be one of {_SCALES}")

    @property
    def d(self) -> int:
        return self.w_q.shape[2]

    @property
    def n_heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[1]

    @property
    def logit_scale(self) -> float:
        return 1.0 / math.sqrt(self.d_head if self.scale == "head" else self.d)

    @classmethod
    def random(cls, d: int, n_heads: int, rng: np.random.Generator, scale: str = "head"):
        """Uniform(-1/sqrt(d), 1/sqrt(d)) projections, identity transform."""
        if d % n_heads:
            raise DimensionMismatch(f"d={d} not divisible by n_heads={n_heads}")
        bound = 1.0 / math.sqrt(d)
        shape = (n_heads, d // n_heads, d)
        w_q, w_k, w_v = (rng.uniform(-bound, bound, size=shape) for _ in range(3))
        return cls(w_q, w_k, w_v, np.eye(d), np.zeros(d), scale)

    @classmethod
    def identity_slices(
        cls, d: int, n_heads: int, qk_scale: float = 1.0, alpha: float = 1.0, scale: str = "head"
    ):
        """Prescribed weights: head ``m`` reads coordinate block ``m`` of its input.

        Queries and keys are scaled by ``qk_scale`` and values by ``alpha``,
        so head ``m`` pulls block ``m`` of the query toward an
        attention-weighted mean of the keys' block ``m``.
        """
        if d % n_heads:
            raise DimensionMismatch(f"d={d} not divisible by n_heads={n_heads}")
        slices = np.eye(d).reshape(n_heads, d // n_heads, d)
        return cls(
            qk_scale * slices, qk_scale * slices, alpha * slices, np.eye(d), np.zeros(d), scale
        )

    def with_values(self, w_v) -> "GeoParams":
        return GeoParams(self.w_q, self.w_k, w_v, self.h_w, self.h_b, self.scale)

    def transform(self, x: np.ndarray) -> np.ndarray:
        """h(x) = relu(H_W x + H_b), row-wise for a matrix."""
        return np.maximum(x @ self.h_w.T + self.h_b, 0.0)

    def save(self, path) -> None:
        """Write the flat little-endian ``GEO1`` binary layout."""
        with open(path, "wb") as fh:
            fh.write(_MAGIC + struct.pack("<II", self.d, self.n_heads))
            for m in range(self.n_heads):
                for w in (self.w_q, self.w_k, self.w_v):
                    fh.write(w[m].astype("<f8").tobytes(order="C"))
            fh.write(self.h_w.astype("<f8").tobytes(order="C"))
            fh.write(self.h_b.astype("<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path, scale: str = "head") -> "GeoParams":
        raw = Path(path).read_bytes()
        if raw[:4] != _MAGIC:
            raise ValueError(f"{path}: not a GEO1 parameter file")
        d, m = struct.unpack_from("<II", raw, 4)
        if m == 0 or d % m:
            raise ValueError(f"{path}: invalid header d={d}, M={m}")
        dh = d // m
        n_floats = 3 * m * dh * d + d * d + d
        body = np.frombuffer(raw, dtype="<f8", offset=12)
        if body.size != n_floats:
            raise ValueError(f"{path}: expected {n_floats} floats, found {body.size}")
        heads = body[: 3 * m * dh * d].reshape(m, 3, dh, d)
        h_w = body[3 * m * dh * d : -d].reshape(d, d)
        return cls(heads[:, 0], heads[:, 1], heads[:, 2], h_w, body[-d:], scale)


@dataclass(frozen=True)
class GeoConfig:
    n_geo: int = 1
    empty_key_behavior: str = "identity"

    def __post_init__(self):
        if self.n_geo < 1:
            raise ValueError("n_geo must be >= 1")
        if self.empty_key_behavior != "identity":
            raise ValueError("only the 'identity' empty-key behavior is supported")


def _key_matrix(keys) -> np.ndarray:
    if isinstance(keys, KeySet):
        return keys.features
    k = np.asarray(keys, dtype=np.float64)
    if k.ndim == 1 and k.size == 0:
        return k.reshape(0, 0)
    if k.ndim != 2:
        raise DimensionMismatch("keys must be a KeySet or an (n, d) matrix")
    return k


def _check_dim(x: np.ndarray, d: int, what: str) -> None:
    if x.shape[-1] != d:
        raise DimensionMismatch(f"{what} has dimension {x.shape[-1]}, expected {d}")


def _check_head(params: GeoParams, head: int) -> None:
    if not 0 <= head < params.n_heads:
        raise IndexError(f"head {head} outside [0, {params.n_heads})")


def similarity(q, k, params: GeoParams, head: int) -> float:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check_dim(q, params.d, "query")
    _check_dim(k, params.d, "key")
    _check_head(params, head)
    return float((params.w_q[head] @ q) @ (params.w_k[head] @ k) * params.logit_scale)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def attention_weights(q, keys, params: GeoParams, head: int) -> np.ndarray:
    k = _key_matrix(keys)
    if k.shape[0] == 0:
        raise ValueError("attention over an empty key set is undefined")
    q = np.asarray(q, dtype=np.float64)
    _check_dim(q, params.d, "query")
    _check_dim(k, params.d, "keys")
    _check_head(params, head)
    logits = (k @ params.w_k[head].T) @ (params.w_q[head] @ q) * params.logit_scale
    return softmax(logits)


def relation_feature(q, keys, params: GeoParams, head: int) -> np.ndarray:
    w = attention_weights(q, keys, params, head)
    values = _key_matrix(keys) @ params.w_v[head].T
    return w @ values


def _project(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-head projection of the rows of ``x``; result is ``(heads, rows, d_head)``."""
    m, dh, d = w.shape
    return (x @ w.reshape(m * dh, d).T).reshape(x.shape[0], m, dh).transpose(1, 0, 2)


def enhance_batch(queries, keys, params: GeoParams) -> np.ndarray:
    """Enhance every row of ``queries`` against the same key set.

    Returns ``queries + concat_m(relation_m)``; with no keys the queries are
    returned unchanged.
    """
    q = np.asarray(queries, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    _check_dim(q, params.d, "queries")
    k = _key_matrix(keys)
    if k.shape[0] == 0:
        out = q.copy()
        return out[0] if single else out
    _check_dim(k, params.d, "keys")

    m, dh, d = params.w_q.shape
    kp = _project(params.w_k, k)
    vp = _project(params.w_v, k)
    qp = _project(params.w_q, q) * params.logit_scale

    rel = np.empty((m, q.shape[0], dh))
    step = max(1, _LOGIT_BLOCK // (m * k.shape[0]))
    for start in range(0, q.shape[0], step):
        block = slice(start, start + step)
        w = softmax(qp[:, block] @ kp.transpose(0, 2, 1))
        rel[:, block] = w @ vp
    out = q + rel.transpose(1, 0, 2).reshape(q.shape[0], d)
    return out[0] if single else out


def stack_batch(queries, keys, params: GeoParams, n_geo: int) -> np.ndarray:
    """Apply ``x <- enhance(h(x), keys)`` ``n_geo`` times.

    ``n_geo=0`` and an empty key set are both no-ops: with nothing to
    attend to, the transform is skipped too.
    """
    if n_geo < 0:
        raise ValueError("n_geo must be non-negative")
    x = np.asarray(queries, dtype=np.float64)
    if len(_key_matrix(keys)) == 0:
        return x.copy()
    for _ in range(n_geo):
        x = enhance_batch(params.transform(x), keys, params)
    return x


def geo_enhance(q, keys, params: GeoParams) -> FeatureVector:
    q = new_feature(q)
    _check_dim(q, params.d, "query")
    if len(_key_matrix(keys)) == 0:
        return q
    return new_feature(enhance_batch(q, keys, params))


def geo_stack(q, keys, params: GeoParams, config: GeoConfig) -> FeatureVector:
    q = new_feature(q)
    _check_dim(q, params.d, "query")
    return new_feature(stack_batch(q, keys, params, config.n_geo))


def geo_reference(q, keys, params: GeoParams) -> FeatureVector:
    """Nested-loop GEO used as an independent oracle. Slow by design."""
    q = [float(v) for v in np.asarray(q, dtype=np.float64)]
    key_rows = [[float(v) for v in row] for row in _key_matrix(keys)]
    d, n_heads, dh = params.d, params.n_heads, params.d_head
    if len(q) != d:
        raise DimensionMismatch(f"query has dimension {len(q)}, expected {d}")
    if not key_rows:
        return new_feature(q)
    if len(key_rows[0]) != d:
        raise DimensionMismatch(f"keys have dimension {len(key_rows[0])}, expected {d}")
    denom = math.sqrt(dh if params.scale == "head" else d)

    def project(w, x):
        return [sum(w[r][c] * x[c] for c in range(d)) for r in range(dh)]

    out = list(q)
    for m in range(n_heads):
        wq, wk, wv = params.w_q[m].tolist(), params.w_k[m].tolist(), params.w_v[m].tolist()
        qm = project(wq, q)
        sims = []
        for row in key_rows:
            km = project(wk, row)
            sims.append(sum(qm[t] * km[t] for t in range(dh)) / denom)
        top = max(sims)
        exps = [math.exp(s - top) for s in sims]
        total = sum(exps)
        for j, row in enumerate(key_rows):
            vm = project(wv, row)
            for t in range(dh):
                out[m * dh + t] += exps[j] / total * vm[t]
    return new_feature(out)
