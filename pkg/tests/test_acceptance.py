"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from membank import (
    GeoParams,
    KeySet,
    MemoryBank,
    PipelineConfig,
    BankConfig,
    SamplingStrategy,
    StreamSpec,
    UpdatePolicy,
    attention_weights,
    generate_stream,
    geo_enhance,
    geo_reference,
    run_video,
    seeded_rng,
    similarity,
)
from membank.bench import (
    ExperimentSpec,
    diversity_stream,
    diversity_trials,
    final_visible_frames,
    quality_proxy,
    run_nk_sweep,
    run_runtime_vs_nm,
)
from membank.geo import softmax
from membank.pipeline import results_csv

from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.acceptance

ORACLE = json.loads((Path(__file__).parent / "oracles" / "quality_proxy.json").read_text())


def report(n, title, ok, detail, elapsed, limit):
    ok = ok and elapsed < limit
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {title} ({detail}; {elapsed:.1f}s of {limit}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_1_geo_oracle_equivalence():
    t0 = time.perf_counter()
    rng = seeded_rng(1)
    worst = 0.0
    for _ in range(100):
        d = int(rng.choice([8, 16]))
        m = int(rng.choice([1, 2, 4]))
        n = int(rng.integers(1, 33))
        params = GeoParams.random(d, m, rng)
        q = rng.standard_normal(d)
        keys = rng.standard_normal((n, d))
        worst = max(worst, float(np.abs(geo_enhance(q, keys, params) - geo_reference(q, keys, params)).max()))
    report(1, "GEO matches loop oracle", worst <= 1e-6, f"max abs err {worst:.2e}", time.perf_counter() - t0, 5)


_case = st.tuples(
    st.sampled_from([(8, 1), (8, 2), (8, 4), (16, 2), (16, 4)]),
    st.integers(1, 12),
    st.integers(0, 2**32 - 1),
    st.floats(-50, 50, allow_nan=False),
)
_counts = {"cases": 0, "worst": {}}


@settings(max_examples=1000, deadline=None, suppress_health_check=list(HealthCheck), database=None)
@given(_case)
def _invariant_case(case):
    (d, m), n, seed, shift = case
    rng = seeded_rng(seed)
    params = GeoParams.random(d, m, rng)
    q = 3 * rng.standard_normal(d)
    keys = 3 * rng.standard_normal((n, d))
    worst = _counts["worst"]

    for h in range(m):
        w = attention_weights(q, keys, params, h)
        assert np.all((w > 0) & (w <= 1))
        worst["sum"] = max(worst.get("sum", 0), abs(w.sum() - 1))
        logits = np.array([similarity(q, k, params, h) for k in keys])
        worst["shift"] = max(worst.get("shift", 0), float(np.abs(softmax(logits + shift) - w).max()))

    ks = KeySet(keys, np.full(n, 0.5), np.zeros(n), np.zeros(n), np.arange(n))
    base = geo_enhance(q, ks, params)
    perm = geo_enhance(q, ks.permuted(rng.permutation(n)), params)
    worst["perm"] = max(worst.get("perm", 0), float(np.abs(base - perm).max()))
    assert base.shape == (d,)

    assert np.array_equal(geo_enhance(q, KeySet.empty(d), params), q)
    assert np.array_equal(geo_enhance(q, ks, params.with_values(np.zeros_like(params.w_v))), q)
    _counts["cases"] += 1


def test_2_attention_invariants():
    t0 = time.perf_counter()
    _invariant_case()
    w = _counts["worst"]
    ok = _counts["cases"] >= 1000 and w["sum"] <= 1e-9 and w["perm"] <= 1e-12 and w["shift"] <= 1e-12
    detail = f"{_counts['cases']} cases, sum {w['sum']:.1e}, perm {w['perm']:.1e}, shift {w['shift']:.1e}"
    report(2, "attention invariants", ok, detail, time.perf_counter() - t0, 10)


def test_3_sampling_flat_concatenation_grows():
    t0 = time.perf_counter()
    rows = run_runtime_vs_nm(ExperimentSpec("runtime-vs-nm"))
    sampled = {r["n_m"]: r["median_ns"] for r in rows if r["mode"] == "sampling"}
    concat = {r["n_m"]: r["median_ns"] for r in rows if r["mode"] == "concatenation" and r["status"] == "ok"}
    flat = max(sampled.values()) / min(sampled.values())
    growth = concat[64000] / concat[4000]
    ok = flat <= 1.3 and growth >= 4
    detail = f"sampled max/min {flat:.2f}, concat 64k/4k {growth:.1f}x"
    report(3, "sampled latency flat in N_m", ok, detail, time.perf_counter() - t0, 120)


def test_4_nk_sweep_trend():
    t0 = time.perf_counter()
    rows = run_nk_sweep(ExperimentSpec("nk-sweep"))
    med = [r["median_ns"] for r in rows]
    monotone = all(b >= 0.9 * a for a, b in zip(med, med[1:]))
    first = rows[0]
    gain = float(first["enhanced_cosine"]) > float(first["raw_cosine"])
    detail = "medians " + "/".join(f"{m / 1e6:.1f}" for m in med) + f" ms, proxy at N_k={first['n_k']} " \
        f"{float(first['raw_cosine']):.4f}->{float(first['enhanced_cosine']):.4f}"
    report(4, "latency non-decreasing in N_k, small N_k helps", monotone and gain, detail, time.perf_counter() - t0, 120)


def _inclusion(bank, trials, rng):
    pos = {s: i for i, s in enumerate(bank.slot_ids())}
    counts = np.zeros(len(bank))
    for _ in range(trials):
        for s in bank.construct_key_set(rng).slot_ids:
            counts[pos[s]] += 1
    return counts / trials


def test_5_sampling_strategies():
    t0 = time.perf_counter()
    rng = seeded_rng(5)
    trials = 10**5

    bank = MemoryBank(10, 3, dim=1, strategy="random")
    bank.insert_arrays(np.zeros((10, 1)), rng.random(10), 0, rng)
    rand = _inclusion(bank, trials, rng)
    dev = float(np.abs(rand - 0.3).max())

    scores = np.array([0.05, 0.3, 0.3, 0.5, 0.7, 0.9, 0.95, 1.0])
    bank = MemoryBank(8, 3, dim=1, strategy="freq")
    bank.insert_arrays(np.zeros((8, 1)), scores, 0, rng)
    freq = _inclusion(bank, trials, rng)
    monotone = all(freq[i] >= freq[j] for i in range(8) for j in range(8) if scores[i] > scores[j])

    dominance = True
    for _ in range(200):
        n, k = int(rng.integers(2, 40)), int(rng.integers(1, 40))
        bank = MemoryBank(n, k, dim=1, strategy="score")
        bank.insert_arrays(np.zeros((n, 1)), np.round(rng.random(n), 1), 0, rng)
        keys = bank.construct_key_set(rng)
        chosen = np.isin(bank.concat_key_set().slot_ids, keys.slot_ids)
        rest = bank.concat_key_set().scores[~chosen]
        dominance &= len(keys) == min(n, k) and (rest.size == 0 or keys.scores.min() >= rest.max())

    ok = dev <= 0.02 and monotone and dominance
    detail = f"random max dev {dev:.4f}, freq monotone {monotone}, top-k dominance {dominance}"
    report(5, "sampling uniformity/monotonicity/dominance", ok, detail, time.perf_counter() - t0, 30)


def test_6_visible_frames():
    t0 = time.perf_counter()
    n_mem, u = 2000, 50
    bound = n_mem // u
    t_end = 4 * n_mem // u
    frame_wise = {final_visible_frames(n_mem, u, t_end, UpdatePolicy.frame_wise(), s) for s in range(5)}
    wins = sum(final_visible_frames(n_mem, u, t_end, UpdatePolicy.feature_wise(), s) > bound for s in range(1000))
    ok = frame_wise == {bound} and wins >= 990
    detail = f"frame-wise {sorted(frame_wise)} (bound {bound}), feature-wise above bound {wins}/1000"
    report(6, "feature-wise updating widens visible frames", ok, detail, time.perf_counter() - t0, 60)


def test_7_diversity():
    t0 = time.perf_counter()
    spec = ExperimentSpec("diversity", stream=diversity_stream(), grid=("random", "score"),
                          n_mem=2000, n_key=256, repetitions=30)
    ent = diversity_trials(spec)
    wins = int(np.sum(ent["random"] >= ent["score"]))
    detail = f"random >= score in {wins}/30, mean {ent['random'].mean():.2f} vs {ent['score'].mean():.2f} nats"
    report(7, "random key sets are more diverse", wins >= 27, detail, time.perf_counter() - t0, 60)


def test_8_quality_proxy():
    t0 = time.perf_counter()
    spec = ExperimentSpec(**ORACLE["spec"])
    res = quality_proxy(spec)
    gain = res.enhanced_cosine - res.raw_cosine
    err = max(abs(res.enhanced_cosine - ORACLE["enhanced_cosine"]), abs(res.raw_cosine - ORACLE["raw_cosine"]))
    rows = np.array(ORACLE["first_enhanced_rows"])
    err = max(err, float(np.abs(res.enhanced[: len(rows)] - rows).max()))
    live = geo_reference(res.raw[0], res.keys, res.params)
    err = max(err, float(np.abs(res.enhanced[0] - live).max()))
    ok = gain >= 0.05 and err <= 1e-6 and res.enhanced.shape == (ORACLE["n_queries"], spec.stream.d)
    detail = f"cosine {res.raw_cosine:.4f}->{res.enhanced_cosine:.4f} (gain {gain:.4f}), oracle err {err:.1e}"
    report(8, "enhancement denoises toward class centroids", ok, detail, time.perf_counter() - t0, 30)


def test_9_end_to_end_determinism():
    t0 = time.perf_counter()
    frames = generate_stream(StreamSpec(n_frames=30, d=64, seed=9))
    bank = BankConfig(capacity=2000, n_key=256)
    same = {}
    for offline in (False, True):
        cfg = PipelineConfig(offline_test=offline, pixel_bank=bank, instance_bank=bank, n_heads=4, seed=9, timing=False)
        a, b = (results_csv(run_video(frames, cfg), timing=False).encode() for _ in range(2))
        same["offline" if offline else "online"] = a == b and len(a) > 0
    detail = ", ".join(f"{k} identical {v}" for k, v in same.items())
    report(9, "run_video CSV is byte-identical across runs", all(same.values()), detail, time.perf_counter() - t0, 30)
