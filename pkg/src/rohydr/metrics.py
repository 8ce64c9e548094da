"""Evaluation metrics for scalar sentiment predictions in [-3, 3].

Conventions, applied uniformly to predictions and labels:
  - binary class: non-negative counts as positive (zero included),
  - seven-way class: round to nearest integer (ties to even), then
    clamp into -3..3,
  - F1 is the binary F1 of the positive class; degenerate splits with
    an empty denominator score zero rather than raising.
Every metric runs over all instances, with no neutral-band exclusion.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError


def _pair(pred, y):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if pred.shape != y.shape:
        raise ShapeError(f"metric inputs disagree: {pred.shape} vs {y.shape}")
    if len(pred) == 0:
        raise ShapeError("metrics need at least one instance")
    return pred, y


def binary_accuracy(pred, y):
    pred, y = _pair(pred, y)
    return float(np.mean((pred >= 0) == (y >= 0)))


def seven_class_accuracy(pred, y):
    pred, y = _pair(pred, y)
    return float(np.mean(_bucket(pred) == _bucket(y)))


def _bucket(v):
    return np.clip(np.rint(v), -3, 3)


def f1_positive(pred, y):
    pred, y = _pair(pred, y)
    pp = pred >= 0
    yp = y >= 0
    tp = float(np.sum(pp & yp))
    fp = float(np.sum(pp & ~yp))
    fn = float(np.sum(~pp & yp))
    if tp == 0.0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)
