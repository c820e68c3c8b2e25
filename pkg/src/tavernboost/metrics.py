"""ROC curve, AUC and thresholded classification metrics.

The non-survived class (label 1) is the positive class throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    # integer counts behind the rates, kept for an exact area
    fp: np.ndarray
    tp: np.ndarray


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return s, y.astype(np.int64)


def roc_curve(scores, labels) -> RocCurve:
    """ROC points from (0, 0) to (1, 1), one per distinct score (descending).

    Tied scores across classes produce a single diagonal segment.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.r_[0, np.cumsum(y)[last_of_group]]
    fp = np.r_[0, (last_of_group + 1) - tp[1:]]
    thresholds = np.r_[np.inf, s[last_of_group]]
    return RocCurve(fp / n_neg, tp / n_pos, thresholds, fp, tp)


def auc(scores, labels) -> float:
    """Trapezoidal area under :func:`roc_curve`.

    Accumulated in integer counts, so it coincides with the Mann-Whitney
    statistic P(s+ > s-) + P(s+ == s-)/2 up to one final division.
    """
    curve = roc_curve(scores, labels)
    fp, tp = curve.fp, curve.tp
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    return twice_area / (2.0 * fp[-1] * tp[-1])


def mann_whitney_auc(scores, labels) -> float:
    """O(n_pos * n_neg) pairwise statistic; the independent oracle for :func:`auc`."""
    s, y = _check(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs both classes present")
    wins = 0.0
    for p in pos:
        wins += np.count_nonzero(p > neg) + 0.5 * np.count_nonzero(p == neg)
    return wins / (pos.size * neg.size)


@dataclass(frozen=True)
class ConfusionMetrics:
    sensitivity: float
    specificity: float
    accuracy: float
    f1: float

    def __iter__(self):
        return iter((self.sensitivity, self.specificity, self.accuracy, self.f1))


def confusion_counts(scores, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(TP, FN, TN, FP) with a row predicted positive iff score > threshold."""
    s, y = _check(scores, labels)
    pred = s > threshold
    tp = int(np.sum(pred & (y == 1)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    fp = int(np.sum(pred & (y == 0)))
    return tp, fn, tn, fp


def confusion_metrics(scores, labels, threshold: float = 0.5) -> ConfusionMetrics:
    tp, fn, tn, fp = confusion_counts(scores, labels, threshold)
    if tp + fn == 0 or tn + fp == 0:
        raise ValueError("sensitivity/specificity need both classes present")
    denom = 2 * tp + fp + fn
    return ConfusionMetrics(
        sensitivity=tp / (tp + fn),
        specificity=tn / (tn + fp),
        accuracy=(tp + tn) / (tp + fn + tn + fp),
        f1=0.0 if tp == 0 else 2 * tp / denom,
    )
