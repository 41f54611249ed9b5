import numpy as np
import pytest

from membank import CosineNearestCentroid, ScoreModel, StreamSpec, generate_stream, labeled_eval_set
from membank.pipeline import frame_to_json, parse_stream
from membank.synthgen import centroids, generate_arrays


def test_full_redundancy_repeats_frame_zero():
    arr = generate_arrays(StreamSpec(n_frames=5, d=8, redundancy_rho=1.0, noise_sigma=0.0))
    assert np.array_equal(arr["instance"][4], arr["instance"][0])
    arr = generate_arrays(StreamSpec(n_frames=5, d=8, redundancy_rho=1.0, noise_sigma=0.7))
    assert np.allclose(arr["pixel"][3], arr["pixel"][0], atol=0)


def test_no_redundancy_decorrelates_consecutive_frames():
    spec = StreamSpec(n_frames=2, d=50, pixel_per_frame=200, instance_per_frame=0, redundancy_rho=0.0, seed=1)
    arr = generate_arrays(spec)
    dev = arr["pixel"] - arr["centroids"][arr["pixel_classes"]][None]
    a, b = dev[0].ravel(), dev[1].ravel()
    assert a.size == 10**4
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_noise_free_features_equal_centroids():
    spec = StreamSpec(n_frames=3, d=8, noise_sigma=0.0, redundancy_rho=0.0)
    arr = generate_arrays(spec)
    cent = centroids(spec)
    assert np.array_equal(arr["instance"][2], cent[arr["instance_classes"]])


def test_stationary_noise_level():
    spec = StreamSpec(n_frames=30, d=32, pixel_per_frame=200, instance_per_frame=0, redundancy_rho=0.9, noise_sigma=1.0)
    arr = generate_arrays(spec)
    dev = arr["pixel"] - arr["centroids"][arr["pixel_classes"]][None]
    per_frame = dev.reshape(30, -1).std(axis=1)
    assert np.all(np.abs(per_frame - 1.0) < 0.05)


def test_frame_correlated_scores():
    spec = StreamSpec(n_frames=10, d=4, instance_per_frame=20, score_model=ScoreModel.FRAME_CORRELATED, score_spread=0.05)
    s = generate_arrays(spec)["instance_scores"]
    assert np.all(s.max(axis=1) - s.min(axis=1) <= 0.1 + 1e-12)
    assert np.all((0 <= s) & (s <= 1))


def test_class_balance():
    for frame in generate_stream(StreamSpec(n_frames=2, d=4, n_classes=7, instance_per_frame=30, pixel_per_frame=23)):
        for items, n in ((frame.instance_features, 30), (frame.pixel_features, 23)):
            counts = np.bincount([f.class_id for f in items], minlength=7)
            assert np.all(np.abs(counts - n / 7) <= 1)


def test_determinism_and_schema():
    spec = StreamSpec(n_frames=3, d=4, seed=9)
    a, b = generate_stream(spec), generate_stream(spec)
    lines = [frame_to_json(f) for f in a]
    assert lines == [frame_to_json(f) for f in b]
    back = parse_stream(lines)
    assert [f.frame_index for f in back] == [0, 1, 2]


def test_invalid_specs():
    for kw in (dict(redundancy_rho=1.5), dict(noise_sigma=-1), dict(n_frames=0), dict(centroid_scale=0)):
        with pytest.raises(ValueError):
            StreamSpec(**kw)


def _accuracy(spec, sigma, n=2000):
    queries, labels = labeled_eval_set(spec, n, sigma)
    clf = CosineNearestCentroid().fit(centroids(spec), np.arange(spec.n_classes))
    return float(np.mean(clf.predict(np.stack([q.feature for q in queries])) == labels))


def test_eval_set_noise_free_is_perfect():
    assert _accuracy(StreamSpec(d=64), 0.0) == 1.0


def test_eval_set_heavy_noise_near_chance():
    # separation is O(centroid_scale * sqrt(d)) = 4; sigma 200 swamps it
    acc = _accuracy(StreamSpec(d=64, n_classes=10), 200.0, n=5000)
    # Monte Carlo baseline: binomial std at p=0.1, n=5000 is ~0.004
    assert abs(acc - 0.1) < 0.02


def test_eval_set_deterministic():
    spec = StreamSpec(d=8, seed=5)
    (qa, la), (qb, lb) = labeled_eval_set(spec, 20, 0.3), labeled_eval_set(spec, 20, 0.3)
    assert np.array_equal(la, lb)
    assert all(np.array_equal(x.feature, y.feature) for x, y in zip(qa, qb))
    with pytest.raises(ValueError):
        labeled_eval_set(spec, 5, -0.1)
