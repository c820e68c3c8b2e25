"""Acceptance suite: one test per criterion, each also reported as a PASS/FAIL line."""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from tavernboost import explain
from tavernboost.encoding import Preprocessor
from tavernboost.explain import ShapMatrix, brute_shapley, mean_abs_importance
from tavernboost.gbdt import TrainParams, fit_ensemble, load_model, logloss, predict_margin, save_model, staged_margins
from tavernboost.metrics import auc, confusion_metrics, mann_whitney_auc
from tavernboost.schema import apply_derivations, load_dataset
from tavernboost.validation import encode_for, fit_model, oversample_minority, run_fold

from .conftest import ACCEPTANCE_LINES, EFFICIENCY_SEEN
from .helpers import random_ensemble
from .test_validation import poisoned

SEED = 16017


def record(name: str, ok: bool, detail: str) -> None:
    line = (name, bool(ok), detail)
    ACCEPTANCE_LINES.append(line)
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, f"{name}: {detail}"


def test_c01_shap_oracle_equivalence():
    rng = np.random.default_rng(SEED)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        e = random_ensemble(rng, max_trees=3, max_depth=3, max_features=6)
        for _ in range(5):
            row = rng.integers(0, 5, size=e.n_features)
            fast = explain.tree_shap(e, row).phi
            worst = max(worst, float(np.max(np.abs(fast - brute_shapley(e, row).phi))))
    elapsed = time.perf_counter() - start
    record("1 SHAP oracle equivalence", worst <= 1e-8 and elapsed < 60,
           f"max |diff| {worst:.2e} (tol 1e-8), {elapsed:.1f}s (limit 60s)")


def test_c02_efficiency_axiom(cohort):
    rng = np.random.default_rng(SEED + 1)
    gaps = []
    for _ in range(50):
        e = random_ensemble(rng)
        rows = rng.integers(0, 5, size=(10, e.n_features))
        gaps.append(explain.efficiency_gap(explain.shap_matrix(e, rows), e, rows))
    deep = fit_model(cohort, params=TrainParams(max_depth=8))
    m = encode_for(deep, cohort)
    gaps.append(explain.efficiency_gap(explain.shap_matrix(deep, m), deep, m))
    worst = max(max(gaps), EFFICIENCY_SEEN["max_gap"])
    record("2 efficiency axiom", worst < 1e-9,
           f"max gap {worst:.2e} over {EFFICIENCY_SEEN['matrices']} guarded matrices (tol 1e-9)")


def test_c03_importance_reproduction():
    r = mean_abs_importance(ShapMatrix(np.array([[1.0, -2.0], [3.0, 0.0]]), 0.0, ("m1", "m2")))
    got = tuple(r.as_dict()[k] for k in ("m1", "m2"))
    record("3 mean |phi| reproduction", got == (2.0, 1.0), f"{got} == (2.0, 1.0)")


def test_c04_auc_duality():
    rng = np.random.default_rng(SEED + 4)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[rng.choice(n, 2, replace=False)] = (0, 1)
        s = rng.integers(0, int(rng.integers(1, 40)), n).astype(float)  # coarse grid forces ties
        worst = max(worst, abs(auc(s, y) - mann_whitney_auc(s, y)))
    record("4 AUC duality", worst <= 1e-12, f"max |trapezoid - pairwise| {worst:.2e} (tol 1e-12)")


def test_c05_confusion_arithmetic():
    y = np.r_[np.ones(30), np.zeros(240)].astype(int)
    s = np.r_[np.ones(11), np.zeros(19), np.zeros(233), np.ones(7)]
    got = tuple(confusion_metrics(s, y))
    derived = (11 / 30, 233 / 240, 244 / 270, 22 / 48)
    reported = (0.37, 0.97, 0.90, 0.45)
    ok = np.allclose(got, derived, atol=1e-15) and all(abs(a - b) <= 0.005 for a, b in zip(got, reported))
    record("5 confusion metric arithmetic", ok,
           f"{tuple(round(v, 3) for v in got)} vs reported {reported} (tol 0.005)")


def test_c06_monotone_training(cohort):
    pre = Preprocessor.fit(cohort)
    m = pre.transform(cohort)
    worst = -np.inf
    for params in (TrainParams(iterations=200), TrainParams(iterations=200, max_depth=8)):
        model = fit_ensemble(m, cohort.label, params, pre)
        losses = np.array([logloss(cohort.label, s) for s in staged_margins(model, m)])
        worst = max(worst, float(np.max(np.diff(losses))))
    record("6 monotone training loss", worst <= 1e-12, f"largest per-step increase {worst:.2e} (tol 1e-12)")


def test_c07_leakage_poison(cohort):
    identical = []
    for test_row in (int(np.flatnonzero(cohort.label == 1)[0]), int(np.flatnonzero(cohort.label == 0)[0])):
        train = np.setdiff1d(np.arange(cohort.n_rows), [test_row])
        seed = 1000 + test_row
        clean = run_fold(cohort, train, [test_row], seed=seed).model.to_json()
        dirty = run_fold(poisoned(cohort, test_row), train, [test_row], seed=seed).model.to_json()
        identical.append(clean == dirty)
    record("7 leakage poison test", all(identical), f"byte-identical fold models: {identical}")


def test_c08_oversampling_contract(cohort):
    rows = np.arange(cohort.n_rows)
    out = oversample_minority(cohort.label, rows, SEED)
    y = cohort.label[out]
    maj = out[y == 0]
    ok = (
        out.size == 480
        and np.sum(y == 0) == 240
        and np.sum(y == 1) == 240
        and np.unique(maj).size == maj.size
        and np.array_equal(out, oversample_minority(cohort.label, rows, SEED))
    )
    record("8 oversampling contract", ok, f"{out.size} rows, classes {np.sum(y == 0)}/{np.sum(y == 1)}")


def _cli(*args):
    proc = subprocess.run([sys.executable, "-m", "tavernboost", *args], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def _pipeline(out, n_jobs: int):
    start = time.perf_counter()
    _cli("generate", "--out", str(out), "--seed", str(SEED))
    data = ["--data", str(out / "cohort.csv"), "--schema", str(out / "cohort_schema.json")]
    _cli("explain", *data, "--out", str(out), "--seed", str(SEED))
    _cli("select", "--out", str(out), "--threshold-level", "0.05")
    _cli("validate", *data, "--features", str(out / "selected_features.json"), "--repeats", "5",
         "--scheme", "loocv", "--seed", str(SEED), "--out", str(out), "--n-jobs", str(n_jobs))
    return time.perf_counter() - start


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    out = tmp_path_factory.mktemp("e2e")
    return out, _pipeline(out, n_jobs=1)


@pytest.mark.slow
def test_c09_end_to_end(e2e):
    out, elapsed = e2e
    rep = json.loads((out / "report.json").read_text())
    well_formed = rep["plan"]["repeats"] == 5 and all(
        len(rep["metrics"][k]["per_repeat"]) == 5 and {"mean", "sd"} <= set(rep["metrics"][k])
        for k in ("auc", "sensitivity", "specificity", "accuracy", "f1")
    )
    pooled_auc = rep["metrics"]["auc"]["mean"]
    # the explain-stage attributions also satisfy efficiency
    ds = apply_derivations(load_dataset(out / "cohort.csv", out / "cohort_schema.json"))
    model = load_model(out / "explain_model.json")
    explain.shap_matrix(model, encode_for(model, ds))
    summary = ", ".join(f"{k} {rep['metrics'][k]['mean']:.3f}±{rep['metrics'][k]['sd']:.3f}" for k in rep["metrics"])
    record("9 end-to-end pipeline", well_formed and pooled_auc >= 0.70 and elapsed < 600,
           f"{elapsed:.0f}s (limit 600s), {len(rep['features'])} features kept; {summary}")


@pytest.mark.slow
def test_c10_determinism(e2e, tmp_path):
    out, _ = e2e
    _pipeline(tmp_path, n_jobs=2)
    same = (out / "report.json").read_bytes() == (tmp_path / "report.json").read_bytes()
    record("10 determinism", same, "report.json byte-identical across reruns (n_jobs 1 vs 2)")


def test_c11_model_roundtrip(cohort, tmp_path):
    model = fit_model(cohort, params=TrainParams(iterations=200))
    save_model(model, tmp_path / "model.json")
    back = load_model(tmp_path / "model.json")
    rng = np.random.default_rng(SEED + 11)
    n_bins = np.array([t.binmap.n_bins for t in model.preprocessor.transforms])
    rows = rng.integers(0, n_bins, size=(100, n_bins.size))
    diff = float(np.max(np.abs(predict_margin(model, rows) - predict_margin(back, rows))))
    record("11 model round trip", diff <= 1e-15, f"max |margin diff| {diff:.1e} on 100 rows (tol 1e-15)")
