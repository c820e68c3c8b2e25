"""Fold-safe resampling, repeated cross-validation and hyperparameter search.

Every fold refits its encoders and bin maps on the training rows only, then
oversamples the minority class, then trains. Test rows never influence
anything upstream of their own score.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from functools import partial
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import explain
from .encoding import DEFAULT_MAX_BINS, EncodedMatrix, Preprocessor
from .gbdt import Ensemble, TrainParams, fit_ensemble, predict_proba
from .metrics import auc, confusion_metrics
from .schema import Dataset

log = logging.getLogger(__name__)

METRIC_NAMES = ("auc", "sensitivity", "specificity", "accuracy", "f1")
DEFAULT_THRESHOLD = 0.5
EXPLAIN_DEPTH = 8
DEFAULT_PARAM_GRID = {
    "max_depth": (2, 4, 6, 8),
    "iterations": (100, 300, 500, 1000),
    "learning_rate": (0.02, 0.05, 0.1),
}


class ResamplingWarning(UserWarning):
    pass


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from integer parts, independent of scheduling order."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# -- fold plans ---------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    scheme: str
    n_rows: int
    repeats: int = 1
    k: int | None = None
    seed: int = 16017

    def __post_init__(self):
        if self.scheme not in ("loocv", "kfold"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.scheme == "kfold" and (self.k is None or not 2 <= self.k <= self.n_rows):
            raise ValueError("k-fold needs 2 <= k <= n_rows")
        if self.n_rows < 2:
            raise ValueError("cross-validation needs at least two rows")

    @classmethod
    def loocv(cls, n_rows: int, repeats: int = 5, seed: int = 16017) -> "FoldPlan":
        return cls("loocv", n_rows, repeats, None, seed)

    @classmethod
    def kfold(cls, n_rows: int, k: int = 5, repeats: int = 3, seed: int = 16017) -> "FoldPlan":
        return cls("kfold", n_rows, repeats, k, seed)

    @property
    def n_folds(self) -> int:
        return self.n_rows if self.scheme == "loocv" else self.k

    def folds(self, repeat: int) -> list[tuple[np.ndarray, np.ndarray]]:
        rows = np.arange(self.n_rows)
        if self.scheme == "loocv":
            tests = [rows[i : i + 1] for i in range(self.n_rows)]
        else:
            perm = np.random.default_rng(derive_seed(self.seed, repeat)).permutation(self.n_rows)
            tests = [np.sort(part) for part in np.array_split(perm, self.k)]
        out = []
        for test in tests:
            mask = np.ones(self.n_rows, bool)
            mask[test] = False
            out.append((rows[mask], test))
        return out

    def __iter__(self) -> Iterator[tuple[int, int, np.ndarray, np.ndarray]]:
        for r in range(self.repeats):
            for f, (train, test) in enumerate(self.folds(r)):
                yield r, f, train, test

    def fold_seed(self, repeat: int, fold: int) -> int:
        return derive_seed(self.seed, repeat, fold)

    def describe(self) -> dict:
        d = {"scheme": self.scheme, "repeats": self.repeats, "seed": self.seed, "n_rows": self.n_rows}
        if self.k is not None:
            d["k"] = self.k
        return d


# -- resampling and per-fold fitting ------------------------------------------------


def oversample_minority(labels, train_rows, seed: int) -> np.ndarray:
    """Training rows with minority rows duplicated (uniformly, with replacement) up to balance.

    Every original row appears once, in input order; the extra minority
    draws are appended. Balanced or single-class input comes back unchanged.
    """
    rows = np.asarray(train_rows, dtype=np.intp)
    if rows.size == 0:
        raise ValueError("no training rows to resample")
    y = np.asarray(labels)[rows]
    n_pos = int(np.sum(y == 1))
    n_neg = rows.size - n_pos
    if n_pos == 0 or n_neg == 0:
        warnings.warn("training rows hold a single class; nothing to oversample", ResamplingWarning)
        return rows.copy()
    if n_pos == n_neg:
        return rows.copy()
    minority_label = 1 if n_pos < n_neg else 0
    minority = rows[y == minority_label]
    extra = np.random.default_rng(seed).choice(minority, size=abs(n_neg - n_pos), replace=True)
    return np.concatenate([rows, extra])


def fit_model(
    dataset: Dataset,
    rows=None,
    params: TrainParams | None = None,
    features: Sequence[str] | None = None,
    seed: int | None = None,
    oversample: bool = True,
    max_bins: int = DEFAULT_MAX_BINS,
) -> Ensemble:
    """Fit encoders on ``rows``, oversample, and boost; the returned model is self-contained."""
    params = params or TrainParams()
    if dataset.label is None:
        raise ValueError("training needs a labelled dataset")
    rows = np.arange(dataset.n_rows) if rows is None else np.asarray(rows, dtype=np.intp)
    pre = Preprocessor.fit(dataset, features, rows, max_bins)
    seed = params.seed if seed is None else seed
    train = oversample_minority(dataset.label, rows, seed) if oversample else rows
    sub = dataset.take(train)
    return fit_ensemble(pre.transform(sub), sub.label, params, pre)


def encode_for(model: Ensemble, dataset: Dataset) -> EncodedMatrix:
    if model.preprocessor is None:
        raise ValueError("model carries no preprocessor; cannot encode raw data")
    return model.preprocessor.transform(dataset)


def score_dataset(model: Ensemble, dataset: Dataset) -> np.ndarray:
    return np.atleast_1d(predict_proba(model, encode_for(model, dataset)))


@dataclass(frozen=True, eq=False)
class FoldResult:
    scores: np.ndarray
    model: Ensemble


def run_fold(
    dataset: Dataset,
    train_rows,
    test_rows,
    params: TrainParams | None = None,
    feature_subset: Sequence[str] | None = None,
    seed: int = 0,
    max_bins: int = DEFAULT_MAX_BINS,
) -> FoldResult:
    train_rows = np.asarray(train_rows, dtype=np.intp)
    test_rows = np.asarray(test_rows, dtype=np.intp)
    if np.intersect1d(train_rows, test_rows).size:
        raise ValueError("train and test rows overlap")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ResamplingWarning)
        model = fit_model(dataset, train_rows, params, feature_subset, seed, True, max_bins)
    return FoldResult(score_dataset(model, dataset.take(test_rows)), model)


# -- reports --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MetricsReport:
    plan: dict
    threshold: float
    per_repeat: dict[str, tuple[float, ...]]
    params: dict = field(default_factory=dict)
    features: tuple[str, ...] = ()
    oof_scores: tuple[np.ndarray, ...] = ()
    labels: np.ndarray | None = None

    def mean(self, metric: str) -> float:
        return float(np.mean(self.per_repeat[metric]))

    def sd(self, metric: str) -> float:
        # population SD: exactly 0 for a single repeat
        return float(np.std(self.per_repeat[metric], ddof=0))

    def to_dict(self) -> dict:
        return {
            "plan": self.plan,
            "aggregation": "metrics on pooled out-of-fold scores per repeat; mean and population SD across repeats",
            "threshold": self.threshold,
            "params": self.params,
            "features": list(self.features),
            "metrics": {
                m: {"mean": self.mean(m), "sd": self.sd(m), "per_repeat": list(self.per_repeat[m])}
                for m in METRIC_NAMES
            },
        }

    def summary(self) -> str:
        return ", ".join(f"{m} {self.mean(m):.2f} ± {self.sd(m):.2f}" for m in METRIC_NAMES)


def repeat_metrics(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> dict[str, float]:
    cm = confusion_metrics(scores, labels, threshold)
    return {
        "auc": auc(scores, labels),
        "sensitivity": cm.sensitivity,
        "specificity": cm.specificity,
        "accuracy": cm.accuracy,
        "f1": cm.f1,
    }


def _fold_task(dataset, params, features, max_bins, task):
    repeat, fold, train, test, seed = task
    return run_fold(dataset, train, test, params, features, seed, max_bins).scores


def cross_validate(
    dataset: Dataset,
    plan: FoldPlan,
    params: TrainParams | None = None,
    feature_subset: Sequence[str] | None = None,
    threshold: float = DEFAULT_THRESHOLD,
    n_jobs: int = 1,
    max_bins: int = DEFAULT_MAX_BINS,
) -> MetricsReport:
    """Repeated CV; each repeat's out-of-fold scores are pooled before scoring.

    Fold seeds derive from (plan seed, repeat, fold), so the report does not
    depend on ``n_jobs``.
    """
    params = params or TrainParams()
    if plan.n_rows != dataset.n_rows:
        raise ValueError("fold plan does not match the dataset size")
    features = tuple(dataset.feature_names if feature_subset is None else feature_subset)
    tasks = [(r, f, tr, te, plan.fold_seed(r, f)) for r, f, tr, te in plan]
    work = partial(_fold_task, dataset, params, features, max_bins)
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(work, tasks, chunksize=max(1, len(tasks) // (4 * n_jobs))))
    else:
        results = [work(t) for t in tasks]

    pooled = [np.full(dataset.n_rows, np.nan) for _ in range(plan.repeats)]
    for (r, _, _, test, _), scores in zip(tasks, results):
        pooled[r][test] = scores
    per_repeat: dict[str, list[float]] = {m: [] for m in METRIC_NAMES}
    for r, scores in enumerate(pooled):
        vals = repeat_metrics(scores, dataset.label, threshold)
        for m in METRIC_NAMES:
            per_repeat[m].append(vals[m])
        log.info("repeat %d: auc %.4f f1 %.4f", r, vals["auc"], vals["f1"])
    return MetricsReport(
        plan=plan.describe(),
        threshold=threshold,
        per_repeat={m: tuple(v) for m, v in per_repeat.items()},
        params=params.to_dict(),
        features=features,
        oof_scores=tuple(pooled),
        labels=np.asarray(dataset.label),
    )


# -- full-data importance study -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CohortExplanation:
    model: Ensemble
    matrix: EncodedMatrix
    shap: explain.ShapMatrix
    ranking: explain.ImportanceRanking


def explain_cohort(
    dataset: Dataset,
    features: Sequence[str] | None = None,
    params: TrainParams | None = None,
    seed: int | None = None,
) -> CohortExplanation:
    """Train the deep importance model on every row and attribute every row."""
    params = params or TrainParams(max_depth=EXPLAIN_DEPTH)
    model = fit_model(dataset, None, params, features, seed)
    matrix = encode_for(model, dataset)
    shap = explain.shap_matrix(model, matrix)
    return CohortExplanation(model, matrix, shap, explain.mean_abs_importance(shap))


# -- grid search ----------------------------------------------------------------------


def expand_grid(param_grid: Mapping[str, Sequence] | Sequence[TrainParams], base: TrainParams | None = None) -> list[TrainParams]:
    base = base or TrainParams()
    if not isinstance(param_grid, Mapping):
        return list(param_grid)
    valid = {f.name for f in fields(TrainParams)}
    unknown = set(param_grid) - valid
    if unknown:
        raise ValueError(f"unknown training parameters in grid: {sorted(unknown)}")
    keys = list(param_grid)
    return [replace(base, **dict(zip(keys, combo))) for combo in itertools.product(*(param_grid[k] for k in keys))]


def select_best(scores: Sequence[tuple[float, float]]) -> int:
    """Index of the best (mean AUC, mean F1) pair: AUC first, F1 breaks ties, earliest wins."""
    if not scores:
        raise ValueError("empty grid")
    best = 0
    for i, (a, f) in enumerate(scores[1:], start=1):
        ba, bf = scores[best]
        if a > ba or (a == ba and f > bf):
            best = i
    return best


@dataclass(frozen=True, eq=False)
class GridResult:
    best_params: TrainParams
    best_level: float
    report: MetricsReport
    trials: list[dict]

    def to_dict(self) -> dict:
        return {
            "best_params": self.best_params.to_dict(),
            "best_threshold_level": self.best_level,
            "report": self.report.to_dict(),
            "trials": self.trials,
        }


def grid_search(
    dataset: Dataset,
    param_grid: Mapping[str, Sequence] | Sequence[TrainParams],
    threshold_grid: Sequence[float],
    plan: FoldPlan,
    ranking: explain.ImportanceRanking | None = None,
    n_jobs: int = 1,
    base_params: TrainParams | None = None,
) -> GridResult:
    """Evaluate every (params, feature-threshold level) pair with ``plan``.

    Feature subsets come from ``ranking`` (computed with :func:`explain_cohort`
    when omitted) cut at each level times the top importance.
    """
    candidates = expand_grid(param_grid, base_params)
    levels = list(threshold_grid)
    if not candidates or not levels:
        raise ValueError("parameter and threshold grids must be non-empty")
    if ranking is None:
        ranking = explain_cohort(dataset, seed=plan.seed).ranking
    subsets = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", explain.EmptySelectionWarning)
        for level in levels:
            subsets[level] = explain.select_features(ranking, explain.threshold_for_level(ranking, level))

    trials, reports = [], []
    for params in candidates:
        for level in levels:
            rep = cross_validate(dataset, plan, params, subsets[level], n_jobs=n_jobs)
            reports.append((params, level, rep))
            trials.append({
                "params": params.to_dict(),
                "threshold_level": level,
                "n_features": len(subsets[level]),
                "auc": rep.mean("auc"),
                "f1": rep.mean("f1"),
            })
            log.info("grid %s level %s: %s", params, level, rep.summary())
    best = select_best([(t["auc"], t["f1"]) for t in trials])
    params, level, rep = reports[best]
    return GridResult(params, level, rep, trials)
