"""Confusion matrix and the per-class / overall classification scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError


def f1_score(precision, recall):
    """Harmonic mean of precision and recall; 0 where both are 0."""
    p, r = np.asarray(precision, dtype=np.float64), np.asarray(recall, dtype=np.float64)
    denom = p + r
    return np.divide(2 * p * r, denom, out=np.zeros_like(denom), where=denom > 0)


class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (self.num_classes, self.num_classes) or np.any(self.counts < 0):
            raise ParameterError("confusion counts must be a non-negative square matrix")

    @property
    def total(self):
        return int(self.counts.sum())

    def accumulate(self, truth, pred):
        truth = np.asarray(truth, dtype=np.int64).ravel()
        pred = np.asarray(pred, dtype=np.int64).ravel()
        if truth.shape != pred.shape:
            raise DataError(f"{len(truth)} truth labels vs {len(pred)} predictions")
        for name, arr in (("truth", truth), ("prediction", pred)):
            bad = np.flatnonzero((arr < 0) | (arr >= self.num_classes))
            if len(bad):
                raise DataError(f"{name} label {arr[bad[0]]} at index {bad[0]} outside [0, {self.num_classes})")
        np.add.at(self.counts, (truth, pred), 1)
        return self

    def __add__(self, other):
        if other.num_classes != self.num_classes:
            raise ParameterError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def metrics(self):
        return metrics(self)


@dataclass
class Metrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    oa: float
    avg_f1: float
    flagged: tuple  # classes with an undefined precision, recall or F1


def metrics(cm: ConfusionMatrix):
    if cm.total == 0:
        raise ParameterError("confusion matrix is empty")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    predicted = c.sum(axis=0)
    actual = c.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    f1 = f1_score(precision, recall)
    flagged = tuple(int(k) for k in np.flatnonzero((predicted == 0) | (actual == 0) | (precision + recall == 0)))
    return Metrics(precision, recall, f1, float(tp.sum() / cm.total), float(f1.mean()), flagged)


def format_report(m: Metrics, class_names=None):
    n = len(m.f1)
    names = list(class_names or ())
    names = names[:n] + [f"class_{k}" for k in range(len(names), n)]
    lines = [
        f"class={names[k]} precision={m.precision[k]:.6f} recall={m.recall[k]:.6f} f1={m.f1[k]:.6f}"
        for k in range(n)
    ]
    lines.append(f"oa={m.oa:.6f} avg_f1={m.avg_f1:.6f}")
    if m.flagged:
        lines.append("undefined=" + ",".join(names[k] for k in m.flagged))
    return "\n".join(lines)
