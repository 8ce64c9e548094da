"""Metric conventions pinned against brute-force loops and sklearn."""

import numpy as np
import pytest
from sklearn.metrics import f1_score

from rohydr.metrics import (binary_accuracy, f1_positive,
                            seven_class_accuracy)
from rohydr.tensor import ShapeError


def brute_acc2(pred, y):
    hits = 0
    for p, t in zip(pred, y):
        hits += (p >= 0) == (t >= 0)
    return hits / len(pred)


def brute_acc7(pred, y):
    def bucket(v):
        b = float(np.rint(v))
        return max(-3.0, min(3.0, b))
    hits = sum(bucket(p) == bucket(t) for p, t in zip(pred, y))
    return hits / len(pred)


def test_metrics_match_brute_force_on_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 40))
        pred = rng.uniform(-4, 4, n)
        y = rng.uniform(-3, 3, n)
        assert binary_accuracy(pred, y) == pytest.approx(brute_acc2(pred, y))
        assert seven_class_accuracy(pred, y) \
            == pytest.approx(brute_acc7(pred, y))
        want = f1_score(y >= 0, pred >= 0, zero_division=0.0)
        assert f1_positive(pred, y) == pytest.approx(want)


def test_zero_is_positive_class():
    assert binary_accuracy([0.0], [0.0]) == 1.0
    assert binary_accuracy([0.0], [-0.001]) == 0.0
    assert binary_accuracy([-0.001], [0.0]) == 0.0


def test_seven_class_rounding_and_clamp():
    # ties round to even, out-of-range collapses into the end buckets
    assert seven_class_accuracy([0.5], [0.0]) == 1.0
    assert seven_class_accuracy([1.5], [2.0]) == 1.0
    assert seven_class_accuracy([2.5], [2.0]) == 1.0
    assert seven_class_accuracy([10.0], [3.0]) == 1.0
    assert seven_class_accuracy([-10.0], [-3.0]) == 1.0
    assert seven_class_accuracy([-2.4], [-3.0]) == 0.0


def test_f1_degenerate_cases():
    assert f1_positive([-1, -2], [-1, -2]) == 0.0   # no positives anywhere
    assert f1_positive([1, 1], [1, 1]) == 1.0
    assert f1_positive([-1, 1], [1, -1]) == 0.0


def test_metrics_input_validation():
    with pytest.raises(ShapeError):
        binary_accuracy([1.0], [1.0, 2.0])
    with pytest.raises(ShapeError):
        f1_positive([], [])
