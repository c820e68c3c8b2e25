import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tavernboost.gbdt import (
    DegenerateLabelsWarning,
    Ensemble,
    TrainParams,
    Tree,
    base_log_odds,
    best_split,
    fit_ensemble,
    grow_tree,
    load_model,
    logloss,
    predict_margin,
    predict_proba,
    save_model,
    sigmoid,
    staged_margins,
)

from .helpers import random_ensemble, stump

XOR_BINS = np.array([[1, 1], [1, 2], [2, 1], [2, 2]], np.int32)
XOR_Y = np.array([0, 1, 1, 0])


def test_params_validation():
    for bad in ({"iterations": 0}, {"learning_rate": 0}, {"learning_rate": 1.5}, {"max_depth": 0},
                {"min_samples_leaf": 0}, {"l2_leaf_regularization": -1}):
        with pytest.raises(ValueError):
            TrainParams(**bad)
    p = TrainParams(max_depth=3)
    assert TrainParams.from_dict(p.to_dict()) == p


def test_best_split_gain_and_leaves():
    bins = np.array([[1], [1], [2], [2]])
    g = np.array([-1.0, -1.0, 1.0, 1.0])
    h = np.full(4, 0.25)
    params = TrainParams(l2_leaf_regularization=0.0, max_depth=1)
    f, t, gain = best_split(np.arange(4), bins, g, h, params)
    # G_L=-2, H_L=0.5, G_R=2, H_R=0.5: 4/0.5 + 4/0.5 - 0/1
    assert (f, t) == (0, 1)
    assert gain == pytest.approx(16.0, abs=1e-12)
    tree = grow_tree(g, h, bins, params)
    assert tree.n_nodes == 3
    assert tree.value[tree.left[0]] == pytest.approx(4.0)
    assert tree.value[tree.right[0]] == pytest.approx(-4.0)


def test_homogeneous_gradients_give_single_leaf():
    bins = np.array([[1, 3], [2, 1], [3, 2], [1, 1]])
    g = np.full(4, 0.3)
    h = np.full(4, 0.2)
    assert best_split(np.arange(4), bins, g, h, TrainParams()) is None
    tree = grow_tree(g, h, bins, TrainParams())
    assert tree.n_nodes == 1
    assert tree.value[0] == pytest.approx(-1.2 / (0.8 + 3.0))


def test_tie_goes_to_lower_feature():
    bins = np.array([[1, 1], [1, 1], [2, 2], [2, 2]])
    g = np.array([-1.0, -1.0, 1.0, 1.0])
    f, t, _ = best_split(np.arange(4), bins, g, np.ones(4), TrainParams())
    assert (f, t) == (0, 1)


def test_tie_goes_to_lower_threshold():
    # splitting at either bin boundary yields the same partition
    bins = np.array([[1], [1], [3], [3]])
    g = np.array([-1.0, -1.0, 1.0, 1.0])
    f, t, _ = best_split(np.arange(4), bins, g, np.ones(4), TrainParams())
    assert t == 1


def test_min_samples_leaf_respected():
    bins = np.array([[1], [2], [2], [2]])
    g = np.array([-3.0, 1.0, 1.0, 1.0])
    assert best_split(np.arange(4), bins, g, np.ones(4), TrainParams(min_samples_leaf=2)) is None


def test_depth_cap():
    rng = np.random.default_rng(1)
    bins = rng.integers(0, 8, size=(60, 4))
    y = rng.integers(0, 2, 60)
    model = fit_ensemble(bins, y, TrainParams(iterations=20, max_depth=1))
    assert all(t.n_nodes <= 3 for t in model.trees)
    model = fit_ensemble(bins, y, TrainParams(iterations=20, max_depth=3))
    assert max(t.depth for t in model.trees) <= 3


def test_xor_is_learned():
    model = fit_ensemble(XOR_BINS, XOR_Y, TrainParams(iterations=50, learning_rate=0.5, max_depth=2))
    margins = predict_margin(model, XOR_BINS)
    assert np.array_equal(margins > 0, XOR_Y == 1)
    assert (predict_proba(model, XOR_BINS) > 0.5).astype(int).tolist() == XOR_Y.tolist()
    assert predict_margin(model, np.array([1, 2])) > 0


def test_degenerate_labels():
    with pytest.warns(DegenerateLabelsWarning):
        model = fit_ensemble(np.ones((5, 2)), np.zeros(5))
    assert model.trees == () and model.degenerate
    assert model.base_score == pytest.approx(math.log(1e-6 / (1 - 1e-6)))
    assert predict_proba(model, np.ones((2, 2))) == pytest.approx([1e-6, 1e-6])


def test_base_score_cohort_prevalence():
    y = np.r_[np.zeros(240), np.ones(30)]
    assert base_log_odds(y) == pytest.approx(-2.0794, abs=5e-5)
    model = Ensemble(base_log_odds(y), 0.1, (), ("a",))
    assert predict_proba(model, np.array([3])) == pytest.approx(30 / 270)


def test_predict_definitions():
    assert predict_margin(Ensemble(0.7, 0.1, (), ("a",)), np.array([1])) == 0.7
    e = stump(0, 1, (2.0, -1.0), (3, 1), 1, lr=0.3, base=0.5)
    assert predict_margin(e, np.array([1])) == pytest.approx(0.5 + 0.3 * 2.0)
    assert predict_margin(e, np.array([2])) == pytest.approx(0.5 - 0.3)


def test_sigmoid_edges():
    assert sigmoid(0.0) == 0.5
    with np.errstate(over="raise"):
        assert sigmoid(1000.0) == 1.0
        assert sigmoid(-1000.0) == 0.0


def test_arity_mismatch():
    e = stump(0, 1, (1.0, -1.0), (1, 1), 2)
    with pytest.raises(ValueError):
        predict_margin(e, np.ones((3, 3), int))


def test_leaf_covers_count_training_rows():
    rng = np.random.default_rng(5)
    bins = rng.integers(0, 6, size=(80, 3))
    y = rng.integers(0, 2, 80)
    model = fit_ensemble(bins, y, TrainParams(iterations=10, max_depth=3))
    for t in model.trees:
        counts = np.bincount(t.leaf_index(bins), minlength=t.n_nodes)
        assert np.array_equal(counts[t.leaves], t.cover[t.leaves])


def test_staged_loss_monotone_small():
    rng = np.random.default_rng(3)
    bins = rng.integers(0, 10, size=(200, 5))
    y = (bins[:, 0] + rng.integers(0, 4, 200) > 6).astype(int)
    model = fit_ensemble(bins, y, TrainParams(iterations=100))
    losses = [logloss(y, m) for m in staged_margins(model, bins)]
    assert np.all(np.diff(losses) <= 1e-12)
    assert np.allclose(staged_margins(model, bins)[-1], predict_margin(model, bins))


def test_model_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    bins = rng.integers(0, 10, size=(100, 4))
    y = rng.integers(0, 2, 100)
    model = fit_ensemble(bins, y, TrainParams(iterations=30))
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back.to_json() == model.to_json()
    assert np.array_equal(predict_margin(back, bins), predict_margin(model, bins))
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["version"] == "tavernboost-model-v1"
    d["version"] = "other"
    with pytest.raises(ValueError):
        Ensemble.from_dict(d)


def test_tree_feature_bound_checked():
    t = Tree.from_dict({"feature": [3, -1, -1], "threshold": [0, -1, -1], "left": [1, -1, -1],
                        "right": [2, -1, -1], "value": [0, 1, 2], "cover": [2, 1, 1]})
    with pytest.raises(ValueError):
        Ensemble(0.0, 1.0, (t,), ("a", "b"))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_margin_is_base_plus_scaled_leaf_sum(seed):
    rng = np.random.default_rng(seed)
    e = random_ensemble(rng)
    rows = rng.integers(0, 5, size=(7, e.n_features))
    manual = e.base_score + e.learning_rate * sum(t.predict(rows) for t in e.trees)
    assert np.allclose(predict_margin(e, rows), manual, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_training_is_deterministic(seed, depth):
    rng = np.random.default_rng(seed)
    bins = rng.integers(0, 5, size=(30, 3))
    y = rng.integers(0, 2, 30)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    p = TrainParams(iterations=5, max_depth=depth)
    assert fit_ensemble(bins, y, p).to_json() == fit_ensemble(bins, y, p).to_json()
