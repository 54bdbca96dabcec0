import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphreason.metrics import MetricError, aggregate, average_precision, parse_lines, predicted_labels

import oracles


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.1], [True, True, False]) == 1.0
    assert average_precision([0.9, 0.1], [False, True]) == 0.5
    assert average_precision([0.9, 0.8, 0.7], [True, False, True]) == pytest.approx(5 / 6, abs=1e-15)


def test_ap_without_positives_is_skipped():
    assert math.isnan(average_precision([0.3, 0.2], [False, False]))


def test_ap_ties_follow_input_order():
    assert average_precision([0.5, 0.5], [True, False]) == 1.0
    assert average_precision([0.5, 0.5], [False, True]) == 0.5


def test_single_class_perfect():
    r = aggregate(np.array([[1.0, 0.0], [0.9, 0.1]]), np.array([0, 0]))
    assert r.values() == {"per_instance_ap": 1.0, "per_instance_ac": 1.0, "per_class_ap": 1.0, "per_class_ac": 1.0}


def test_nine_and_one_example():
    scores = np.tile([0.8, 0.2], (10, 1))
    labels = np.array([0] * 9 + [1])
    r = aggregate(scores, labels)
    assert r.per_instance_ac == 0.9
    assert r.per_class_ac == 0.5


def test_empty_input():
    with pytest.raises(MetricError):
        aggregate(np.zeros((0, 3)), np.zeros(0))


def test_argmax_tie_lowest_index():
    assert predicted_labels(np.array([[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]])).tolist() == [0, 1]


def _random_instance(rng):
    r, c = int(rng.integers(1, 12)), int(rng.integers(2, 6))
    # a coarse grid of values makes ties common
    scores = rng.integers(0, 6, size=(r, c)) / 5.0
    return scores, rng.integers(0, c, size=r)


def test_aggregate_matches_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        scores, labels = _random_instance(rng)
        got = aggregate(scores, labels).values()
        want = oracles.metrics(scores.tolist(), labels.tolist())
        assert got == want


def test_per_class_breakdown_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        scores, labels = _random_instance(rng)
        r = aggregate(scores, labels)
        assert sorted(r.per_class) == sorted(set(labels.tolist()))
        for c, d in r.per_class.items():
            assert d["ap"] == oracles.average_precision(scores[:, c].tolist(), (labels == c).tolist())


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_ap_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 15))
    scores = rng.permutation(n) / n
    flags = rng.random(n) < 0.5
    flags[0] = True
    assert average_precision(scores, flags) == average_precision(np.exp(3 * scores) - 2, flags)


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_duplication_leaves_metrics_unchanged(seed):
    rng = np.random.default_rng(seed)
    r, c = int(rng.integers(1, 10)), int(rng.integers(2, 5))
    scores = rng.permutation(r * c).reshape(r, c) / (r * c)
    labels = rng.integers(0, c, size=r)
    once = aggregate(scores, labels).values()
    twice = aggregate(np.vstack([scores, scores]), np.concatenate([labels, labels])).values()
    for k in once:
        assert twice[k] == pytest.approx(once[k], abs=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_instance_accuracy_counts_mistakes(seed):
    rng = np.random.default_rng(seed)
    scores, labels = _random_instance(rng)
    wrong = int((predicted_labels(scores) != labels).sum())
    r = len(labels)
    assert aggregate(scores, labels).per_instance_ac == (r - wrong) / r


def test_values_in_unit_interval_and_lines_round_trip():
    rng = np.random.default_rng(2)
    scores, labels = rng.random((20, 4)), rng.integers(0, 4, size=20)
    r = aggregate(scores, labels)
    assert all(0.0 <= v <= 1.0 for v in r.values().values())
    assert parse_lines(r.lines()) == r.values()
    assert "per_class_ac" in r.text(["a", "b", "c", "d"])
