import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tavernboost.metrics import auc, confusion_counts, confusion_metrics, mann_whitney_auc, roc_curve


def test_perfect_curve():
    s, y = [0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]
    c = roc_curve(s, y)
    assert (0.0, 1.0) in set(zip(c.fpr.tolist(), c.tpr.tolist()))
    assert auc(s, y) == 1.0
    assert auc(s, [0, 0, 1, 1]) == 0.0


def test_all_ties_is_diagonal():
    c = roc_curve([0.5] * 6, [0, 1, 0, 1, 1, 0])
    assert c.fpr.tolist() == [0.0, 1.0] and c.tpr.tolist() == [0.0, 1.0]
    assert auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_curve_endpoints_and_monotone():
    rng = np.random.default_rng(0)
    s = rng.integers(0, 5, 50) / 4
    y = rng.integers(0, 2, 50)
    c = roc_curve(s, y)
    assert (c.fpr[0], c.tpr[0], c.fpr[-1], c.tpr[-1]) == (0, 0, 1, 1)
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)


def test_single_class_rejected():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        roc_curve([0.1], [2])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auc_equals_pairwise(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 120))
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.integers(0, int(rng.integers(1, 30)), n) / 7.0
    assert abs(auc(s, y) - mann_whitney_auc(s, y)) <= 1e-12


def test_table_counts():
    # 11 of 30 positives found, 233 of 240 negatives kept
    y = np.r_[np.ones(30), np.zeros(240)].astype(int)
    s = np.r_[np.ones(11), np.zeros(19), np.zeros(233), np.ones(7)]
    assert confusion_counts(s, y) == (11, 19, 233, 7)
    m = confusion_metrics(s, y)
    assert tuple(round(v, 3) for v in m) == (0.367, 0.971, 0.904, 0.458)


def test_counts_consistent_with_rounded_rates():
    # the only integer counts over 30/240 whose four rates all land within 0.005 of 0.37/0.97/0.90/0.45
    y = np.r_[np.ones(30), np.zeros(240)].astype(int)
    s = np.r_[np.ones(11), np.zeros(19), np.zeros(232), np.ones(8)]
    m = confusion_metrics(s, y)
    assert all(abs(a - b) <= 0.005 for a, b in zip(m, (0.37, 0.97, 0.90, 0.45)))


def test_threshold_is_strict():
    assert confusion_counts([0.5, 0.6], [1, 0], 0.5) == (0, 1, 0, 1)


def test_degenerate_metrics():
    m = confusion_metrics([0.1, 0.2, 0.3], [1, 0, 0])
    assert (m.sensitivity, m.specificity, m.f1) == (0.0, 1.0, 0.0)
    assert tuple(confusion_metrics([0.9, 0.1], [1, 0])) == (1.0, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        confusion_metrics([0.9], [1])
