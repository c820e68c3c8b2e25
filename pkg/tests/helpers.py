"""Shared builders for tests: random tree ensembles and tiny datasets."""

from __future__ import annotations

import numpy as np

from tavernboost.gbdt import Ensemble, Tree
from tavernboost.schema import Dataset, FeatureKind, FeatureSchema, make_column


def random_tree(rng: np.random.Generator, n_features: int, max_depth: int, n_bins: int) -> Tree:
    """Random binary tree whose internal covers are the sums of their children."""
    feat, thr, lft, rgt, val, cov = [], [], [], [], [], []

    def build(depth: int) -> int:
        node = len(feat)
        for arr in (feat, thr, lft, rgt, val, cov):
            arr.append(0)
        if depth < max_depth and rng.random() < 0.8:
            feat[node] = int(rng.integers(n_features))
            thr[node] = int(rng.integers(n_bins - 1))
            lft[node] = build(depth + 1)
            rgt[node] = build(depth + 1)
            cov[node] = cov[lft[node]] + cov[rgt[node]]
            val[node] = 0.0
        else:
            feat[node] = thr[node] = lft[node] = rgt[node] = -1
            val[node] = float(rng.normal())
            cov[node] = float(rng.integers(1, 50))
        return node

    build(0)
    return Tree(
        np.array(feat, np.int32), np.array(thr, np.int32), np.array(lft, np.int32),
        np.array(rgt, np.int32), np.array(val, float), np.array(cov, float),
    )


def random_ensemble(rng: np.random.Generator, max_trees=3, max_depth=3, max_features=6, n_bins=5) -> Ensemble:
    m = int(rng.integers(1, max_features + 1))
    k = int(rng.integers(1, max_trees + 1))
    trees = tuple(random_tree(rng, m, int(rng.integers(0, max_depth + 1)), n_bins) for _ in range(k))
    return Ensemble(float(rng.normal()), float(rng.uniform(0.05, 1.0)), trees, tuple(f"f{j}" for j in range(m)))


def stump(feature: int, threshold: int, values, covers, n_features: int, lr=1.0, base=0.0) -> Ensemble:
    t = Tree(
        np.array([feature, -1, -1], np.int32), np.array([threshold, -1, -1], np.int32),
        np.array([1, -1, -1], np.int32), np.array([2, -1, -1], np.int32),
        np.array([0.0, values[0], values[1]]), np.array([covers[0] + covers[1], covers[0], covers[1]], float),
    )
    return Ensemble(base, lr, (t,), tuple(f"f{j}" for j in range(n_features)))


def numeric_dataset(columns: dict, label, missing: dict | None = None) -> Dataset:
    missing = missing or {}
    cols = []
    for name, vals in columns.items():
        kind = FeatureKind.NUMERICAL if all(isinstance(v, (int, float)) or v is None for v in vals) else FeatureKind.CATEGORICAL
        miss = missing.get(name, [v is None for v in vals])
        cols.append(make_column(FeatureSchema(name, kind), vals, miss))
    return Dataset(tuple(cols), np.asarray(label, np.int8), "y")
