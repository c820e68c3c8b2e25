"""Exact Shapley attributions for the boosted ensemble and importance ranking.

Attributions live in margin (log-odds) space and use the path-dependent
conditional expectation: a feature outside the coalition is marginalized by
descending both branches weighted by training cover.
"""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .gbdt import Ensemble, Tree, predict_margin
from .schema import Dataset

BRUTE_FORCE_MAX_FEATURES = 12
DEFAULT_THRESHOLD_LEVELS = (0.0, 0.01, 0.02, 0.05, 0.1)


class EmptySelectionWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class ShapVector:
    phi: np.ndarray
    base_value: float


@dataclass(frozen=True, eq=False)
class ShapMatrix:
    """Per-row attributions ``phi[j, m]`` sharing one base value."""

    phi: np.ndarray
    base_value: float
    feature_names: tuple[str, ...]

    @property
    def n_rows(self) -> int:
        return self.phi.shape[0]

    def row(self, j: int) -> ShapVector:
        return ShapVector(self.phi[j], self.base_value)


@dataclass(frozen=True)
class ImportanceRanking:
    """(feature, mean |phi|) pairs, most important first."""

    items: tuple[tuple[str, float], ...]

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.items]

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.items])

    def as_dict(self) -> dict[str, float]:
        return dict(self.items)


# -- base value and the brute-force oracle ---------------------------------------


def _tree_expectation(tree: Tree) -> float:
    leaves = tree.leaves
    total = tree.cover[leaves].sum()
    if total <= 0:
        raise ValueError("tree has zero total cover")
    return float(np.dot(tree.value[leaves], tree.cover[leaves]) / total)


def expected_value(ensemble: Ensemble) -> float:
    """Cover-weighted mean margin; equals the mean training-row margin."""
    return ensemble.base_score + ensemble.learning_rate * sum(_tree_expectation(t) for t in ensemble.trees)


def conditional_expectation(tree: Tree, row, present) -> float:
    """E[tree(x) | x_S] under the path-dependent (cover-weighted) distribution."""
    present = set(present)
    row = np.asarray(row)

    def descend(node: int) -> float:
        if tree.left[node] < 0:
            return float(tree.value[node])
        lc, rc = tree.left[node], tree.right[node]
        f = int(tree.feature[node])
        if f in present:
            return descend(lc if row[f] <= tree.threshold[node] else rc)
        wl, wr = tree.cover[lc], tree.cover[rc]
        return (descend(lc) * wl + descend(rc) * wr) / (wl + wr)

    return descend(0)


def brute_shapley(ensemble: Ensemble, row) -> ShapVector:
    """Shapley values by explicit enumeration of all coalitions (testing oracle)."""
    m = ensemble.n_features
    if m > BRUTE_FORCE_MAX_FEATURES:
        raise ValueError(f"brute-force Shapley refuses {m} > {BRUTE_FORCE_MAX_FEATURES} features")
    row = np.asarray(row)
    if row.shape != (m,):
        raise ValueError("row arity does not match the ensemble")

    cache: dict[frozenset, float] = {}

    def v(coalition: frozenset) -> float:
        if coalition not in cache:
            cache[coalition] = ensemble.learning_rate * sum(
                conditional_expectation(t, row, coalition) for t in ensemble.trees
            )
        return cache[coalition]

    phi = np.zeros(m)
    fact = math.factorial
    for i in range(m):
        others = [k for k in range(m) if k != i]
        for size in range(m):
            weight = fact(size) * fact(m - size - 1) / fact(m)
            for subset in itertools.combinations(others, size):
                s = frozenset(subset)
                phi[i] += weight * (v(s | {i}) - v(s))
    return ShapVector(phi, ensemble.base_score + v(frozenset()))


# -- polynomial-time exact algorithm ------------------------------------------------


@njit(cache=True)
def _extend(pf, pz, po, pw, off, depth, zero_fraction, one_fraction, feature):
    pf[off + depth] = feature
    pz[off + depth] = zero_fraction
    po[off + depth] = one_fraction
    pw[off + depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        pw[off + i + 1] += one_fraction * pw[off + i] * (i + 1) / (depth + 1)
        pw[off + i] = zero_fraction * pw[off + i] * (depth - i) / (depth + 1)


@njit(cache=True)
def _unwind(pf, pz, po, pw, off, depth, path_index):
    one_fraction = po[off + path_index]
    zero_fraction = pz[off + path_index]
    next_one = pw[off + depth]
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0.0:
            tmp = pw[off + i]
            pw[off + i] = next_one * (depth + 1) / ((i + 1) * one_fraction)
            next_one = tmp - pw[off + i] * zero_fraction * (depth - i) / (depth + 1)
        else:
            pw[off + i] = pw[off + i] * (depth + 1) / (zero_fraction * (depth - i))
    for i in range(path_index, depth):
        pf[off + i] = pf[off + i + 1]
        pz[off + i] = pz[off + i + 1]
        po[off + i] = po[off + i + 1]


@njit(cache=True)
def _unwound_sum(pz, po, pw, off, depth, path_index):
    one_fraction = po[off + path_index]
    zero_fraction = pz[off + path_index]
    next_one = pw[off + depth]
    total = 0.0
    if one_fraction != 0.0:
        for i in range(depth - 1, -1, -1):
            tmp = next_one / ((i + 1) * one_fraction)
            total += tmp
            next_one = pw[off + i] - tmp * zero_fraction * (depth - i)
    else:
        for i in range(depth - 1, -1, -1):
            total += pw[off + i] / (zero_fraction * (depth - i))
    return total * (depth + 1)


@njit(cache=True)
def _recurse(feature, threshold, left, right, value, cover, row, phi,
             pf, pz, po, pw, node, depth, parent_off,
             parent_zero, parent_one, parent_feature):
    # each recursion level works on its own copy of the path, placed after the parent's
    off = parent_off + depth
    for i in range(depth):
        pf[off + i] = pf[parent_off + i]
        pz[off + i] = pz[parent_off + i]
        po[off + i] = po[parent_off + i]
        pw[off + i] = pw[parent_off + i]
    _extend(pf, pz, po, pw, off, depth, parent_zero, parent_one, parent_feature)

    if left[node] < 0:
        for i in range(1, depth + 1):
            w = _unwound_sum(pz, po, pw, off, depth, i)
            phi[pf[off + i]] += w * (po[off + i] - pz[off + i]) * value[node]
        return

    split = np.int64(feature[node])
    if row[split] <= threshold[node]:
        hot = np.int64(left[node])
        cold = np.int64(right[node])
    else:
        hot = np.int64(right[node])
        cold = np.int64(left[node])
    w = cover[node]
    hot_zero = cover[hot] / w
    cold_zero = cover[cold] / w
    incoming_zero = 1.0
    incoming_one = 1.0

    # a feature split on again further down: undo its earlier entry, then redo it here
    k = 0
    while k <= depth:
        if pf[off + k] == split:
            break
        k += 1
    if k != depth + 1:
        incoming_zero = pz[off + k]
        incoming_one = po[off + k]
        _unwind(pf, pz, po, pw, off, depth, k)
        depth -= 1

    _recurse(feature, threshold, left, right, value, cover, row, phi,
             pf, pz, po, pw, hot, depth + 1, off,
             hot_zero * incoming_zero, incoming_one, split)
    _recurse(feature, threshold, left, right, value, cover, row, phi,
             pf, pz, po, pw, cold, depth + 1, off,
             cold_zero * incoming_zero, 0.0, split)


@njit(cache=True)
def _shap_rows(feat, thr, lft, rgt, val, cov, bins, max_depth, n_features):
    n_trees = feat.shape[0]
    n = bins.shape[0]
    out = np.zeros((n, n_features))
    size = (max_depth + 2) * (max_depth + 3) // 2 + max_depth + 2
    pf = np.zeros(size, np.int64)
    pz = np.zeros(size)
    po = np.zeros(size)
    pw = np.zeros(size)
    phi_t = np.zeros(n_features)
    for r in range(n):
        row = bins[r]
        for t in range(n_trees):
            if lft[t, 0] < 0:
                continue
            for m in range(n_features):
                phi_t[m] = 0.0
            _recurse(feat[t], thr[t], lft[t], rgt[t], val[t], cov[t], row, phi_t,
                     pf, pz, po, pw, np.int64(0), np.int64(0), np.int64(0), 1.0, 1.0, np.int64(-1))
            for m in range(n_features):
                out[r, m] += phi_t[m]
    return out


def _stacked_covers(ensemble: Ensemble) -> np.ndarray:
    feat = ensemble._stacked[0]
    cov = np.zeros(feat.shape)
    for i, t in enumerate(ensemble.trees):
        cov[i, : t.n_nodes] = t.cover
    return cov


def _raw_shap(ensemble: Ensemble, bins: np.ndarray) -> np.ndarray:
    bins = np.ascontiguousarray(np.atleast_2d(bins).astype(np.int32, copy=False))
    if bins.shape[1] != ensemble.n_features:
        raise ValueError(f"row arity {bins.shape[1]} does not match ensemble arity {ensemble.n_features}")
    if not ensemble.trees:
        return np.zeros((bins.shape[0], ensemble.n_features))
    feat, thr, lft, rgt, val = ensemble._stacked
    depth = max(t.depth for t in ensemble.trees)
    per_tree = _shap_rows(feat, thr, lft, rgt, val, _stacked_covers(ensemble), bins, depth, ensemble.n_features)
    return ensemble.learning_rate * per_tree


def tree_shap(ensemble: Ensemble, row) -> ShapVector:
    row = np.asarray(row)
    if row.ndim != 1:
        raise ValueError("tree_shap explains a single row; use shap_matrix for many")
    return ShapVector(_raw_shap(ensemble, row)[0], expected_value(ensemble))


def shap_matrix(ensemble: Ensemble, matrix) -> ShapMatrix:
    """Attributions for every row of an encoded matrix (or raw bin array)."""
    bins = getattr(matrix, "bins", matrix)
    return ShapMatrix(_raw_shap(ensemble, bins), expected_value(ensemble), tuple(ensemble.feature_names))


def efficiency_gap(shap: ShapMatrix, ensemble: Ensemble, matrix) -> float:
    """Largest |base_value + sum(phi) - margin| over the rows."""
    margins = np.atleast_1d(predict_margin(ensemble, getattr(matrix, "bins", matrix)))
    return float(np.max(np.abs(shap.base_value + shap.phi.sum(axis=1) - margins), initial=0.0))


# -- ranking and selection ------------------------------------------------------------


def mean_abs_importance(matrix: ShapMatrix) -> ImportanceRanking:
    """Mean absolute attribution per feature, sorted descending (ties by name)."""
    if matrix.n_rows == 0:
        raise ValueError("cannot rank features from an empty attribution matrix")
    phibar = np.abs(matrix.phi).sum(axis=0) / matrix.n_rows
    items = sorted(zip(matrix.feature_names, (float(v) for v in phibar)), key=lambda kv: (-kv[1], kv[0]))
    return ImportanceRanking(tuple(items))


def threshold_for_level(ranking: ImportanceRanking, level: float) -> float:
    """Absolute cut for a threshold level expressed as a fraction of the top importance."""
    top = max((v for _, v in ranking), default=0.0)
    return level * top


def select_features(ranking: ImportanceRanking, threshold: float) -> list[str]:
    """Features with importance strictly above ``threshold``, in rank order.

    Never returns an empty list for a non-empty ranking: if nothing clears
    the cut, the top feature is kept and a warning is issued.
    """
    kept = [name for name, v in ranking if v > threshold]
    if not kept and len(ranking):
        warnings.warn(
            f"no feature exceeds threshold {threshold}; keeping only {ranking.items[0][0]!r}",
            EmptySelectionWarning,
        )
        kept = [ranking.items[0][0]]
    return kept


def summary_export(
    matrix: ShapMatrix,
    dataset: Dataset,
    ranking: ImportanceRanking | None = None,
    patient_ids: Sequence | None = None,
) -> list[dict]:
    """Long-format rows for a beeswarm plot, ordered by rank then patient.

    Each row: feature, patient, phi, value (blank when missing), missing.
    """
    if matrix.n_rows != dataset.n_rows:
        raise ValueError(f"attribution rows ({matrix.n_rows}) do not match dataset rows ({dataset.n_rows})")
    ranking = ranking or mean_abs_importance(matrix)
    ids = list(range(dataset.n_rows)) if patient_ids is None else list(patient_ids)
    col_of = {name: j for j, name in enumerate(matrix.feature_names)}
    rows = []
    for name in ranking.names:
        j = col_of[name]
        col = dataset.column(name)
        for i in range(matrix.n_rows):
            miss = bool(col.missing[i])
            raw = "" if miss else col.values[i]
            rows.append({"feature": name, "patient": ids[i], "phi": float(matrix.phi[i, j]), "value": raw, "missing": miss})
    return rows


def write_ranking_csv(ranking: ImportanceRanking, path: str | Path, retained: Sequence[str] | None = None) -> None:
    keep = None if retained is None else set(retained)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "phi_bar", "rank"] + ([] if keep is None else ["retained"]))
        for rank, (name, v) in enumerate(ranking, start=1):
            row = [name, repr(v), rank]
            if keep is not None:
                row.append(int(name in keep))
            w.writerow(row)


def read_ranking_csv(path: str | Path) -> ImportanceRanking:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["rank"]))
    return ImportanceRanking(tuple((r["feature"], float(r["phi_bar"])) for r in rows))


def write_summary_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "patient", "phi", "value", "missing"])
        for r in rows:
            w.writerow([r["feature"], r["patient"], repr(r["phi"]), r["value"], int(r["missing"])])
