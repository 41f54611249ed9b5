import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from membank import (
    EmptyVector,
    InvalidScore,
    KeySet,
    Level,
    NonFinite,
    ScoredFeature,
    frame_entropy,
    new_feature,
    seeded_rng,
)


def test_zero_vector_is_valid():
    v = new_feature([0.0, 0.0])
    assert v.shape == (2,)
    assert v.dtype == np.float64
    assert not v.flags.writeable


def test_nan_rejected():
    with pytest.raises(NonFinite):
        new_feature([1.0, float("nan")])


def test_empty_rejected():
    with pytest.raises(EmptyVector):
        new_feature([])


@given(
    st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20),
    st.integers(min_value=0),
    st.sampled_from([math.nan, math.inf, -math.inf]),
)
def test_any_non_finite_entry_rejected(values, pos, bad):
    values = list(values)
    values[pos % len(values)] = bad
    with pytest.raises(NonFinite):
        new_feature(values)


def test_new_feature_copies_input():
    src = np.array([1.0, 2.0])
    v = new_feature(src)
    src[0] = 99.0
    assert v[0] == 1.0


@pytest.mark.parametrize("score", [-0.01, 1.01, math.nan])
def test_scores_outside_unit_interval_rejected(score):
    with pytest.raises(InvalidScore):
        ScoredFeature([1.0], score, 0)


def test_scored_feature_fields():
    f = ScoredFeature([1.0, 2.0], 1.0, 3, 2, "pixel")
    assert f.level is Level.PIXEL
    assert f.dim == 2
    g = f.with_feature([0.0, 0.0])
    assert (g.score, g.frame_index, g.class_id, g.level) == (1.0, 3, 2, Level.PIXEL)
    with pytest.raises(ValueError):
        ScoredFeature([1.0], 0.5, -1)


def test_rng_replay_million_draws():
    a = seeded_rng(2024).random(10**6)
    b = seeded_rng(2024).random(10**6)
    assert np.array_equal(a, b)
    assert not np.array_equal(a[:10], seeded_rng(2025).random(10))


def test_rng_rejects_out_of_range_seed():
    with pytest.raises(ValueError):
        seeded_rng(-1)
    with pytest.raises(ValueError):
        seeded_rng(2**64)


def test_keyset_rejects_duplicate_slots():
    with pytest.raises(ValueError):
        KeySet(np.zeros((2, 3)), [0.1, 0.2], [0, 0], [0, 0], [4, 4])


def test_keyset_elements_roundtrip():
    items = [ScoredFeature([float(i), 1.0], 0.1 * i, 5, i) for i in range(3)]
    ks = KeySet.from_features(items, slot_ids=[7, 8, 9])
    assert len(ks) == 3
    assert list(ks.source_slots) == [7, 8, 9]
    back = ks.elements
    assert [e.class_id for e in back] == [0, 1, 2]
    assert np.array_equal(back[2].feature, [2.0, 1.0])


def test_frame_entropy_values():
    assert frame_entropy([3, 3, 3]) == 0.0
    assert frame_entropy([0, 1, 2, 3]) == pytest.approx(math.log(4), abs=1e-12)
    # hand computation: p = (2/6, 1/6, 3/6)
    expected = -(2 / 6 * math.log(2 / 6) + 1 / 6 * math.log(1 / 6) + 3 / 6 * math.log(3 / 6))
    assert frame_entropy([0, 0, 1, 2, 2, 2]) == pytest.approx(expected, abs=1e-12)
    assert frame_entropy([]) == 0.0


def test_frame_entropy_rows_identify_frames():
    rows = np.array([[0, 5], [1, 5], [1, 5], [0, 7]])
    # (epoch, frame) pairs: three distinct frames with counts 1, 2, 1
    expected = -(0.25 * math.log(0.25) * 2 + 0.5 * math.log(0.5))
    assert frame_entropy(rows) == pytest.approx(expected, abs=1e-12)
