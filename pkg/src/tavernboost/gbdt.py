"""Gradient-boosted decision trees with logistic loss on binned features.

Trees are grown depth-first on per-node gradient/hessian histograms and leaf
values are Newton steps ``-G / (H + l2)``. A row goes left at a split iff
its bin index is ``<=`` the threshold, so the missing bin (index 0) always
goes left.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from numba import njit

from .encoding import EncodedMatrix, Preprocessor

MODEL_VERSION = "tavernboost-model-v1"
PROBA_EPS = 1e-6
# splits must beat this fraction of the parent score; absorbs rounding in zero-gain cases
_GAIN_RTOL = 1e-12


class DegenerateLabelsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TrainParams:
    iterations: int = 500
    learning_rate: float = 0.05
    max_depth: int = 4
    min_samples_leaf: int = 1
    l2_leaf_regularization: float = 3.0
    seed: int = 16017

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.l2_leaf_regularization < 0:
            raise ValueError("l2_leaf_regularization must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainParams":
        return cls(
            iterations=int(d["iterations"]),
            learning_rate=float(d["learning_rate"]),
            max_depth=int(d["max_depth"]),
            min_samples_leaf=int(d["min_samples_leaf"]),
            l2_leaf_regularization=float(d["l2_leaf_regularization"]),
            seed=int(d["seed"]),
        )


# -- compiled kernels ----------------------------------------------------------


@njit(cache=True)
def _sum_gh(grad, hess, idx, start, end):
    g = 0.0
    h = 0.0
    for k in range(start, end):
        r = idx[k]
        g += grad[r]
        h += hess[r]
    return g, h


@njit(cache=True)
def _node_split(bins, grad, hess, idx, start, end, n_bins, l2, min_leaf, g_tot, h_tot):
    best_f = -1
    best_t = -1
    count = end - start
    denom = h_tot + l2
    if denom <= 0.0 or count < 2 * min_leaf:
        return best_f, best_t, 0.0
    parent = g_tot * g_tot / denom
    best_gain = _GAIN_RTOL * max(1.0, parent)
    max_nb = 0
    for f in range(bins.shape[1]):
        if n_bins[f] > max_nb:
            max_nb = n_bins[f]
    hg = np.zeros(max_nb)
    hh = np.zeros(max_nb)
    hc = np.zeros(max_nb, np.int64)
    for f in range(bins.shape[1]):
        nb = n_bins[f]
        for b in range(nb):
            hg[b] = 0.0
            hh[b] = 0.0
            hc[b] = 0
        for k in range(start, end):
            r = idx[k]
            b = bins[r, f]
            hg[b] += grad[r]
            hh[b] += hess[r]
            hc[b] += 1
        gl = 0.0
        hl = 0.0
        cl = 0
        for t in range(nb - 1):
            gl += hg[t]
            hl += hh[t]
            cl += hc[t]
            if cl < min_leaf:
                continue
            if count - cl < min_leaf:
                break
            dl = hl + l2
            dr = (h_tot - hl) + l2
            if dl <= 0.0 or dr <= 0.0:
                continue
            gr = g_tot - gl
            gain = gl * gl / dl + gr * gr / dr - parent
            if gain > best_gain:
                best_gain = gain
                best_f = f
                best_t = t
    if best_f < 0:
        return -1, -1, 0.0
    return best_f, best_t, best_gain


@njit(cache=True)
def _lookahead_split(bins, grad, hess, idx, start, end, n_bins, l2, min_leaf, g_tot, h_tot, buf):
    """Break a zero-gain stall (XOR-like nodes) by scoring splits two levels deep.

    Only candidates whose own gain is zero are eligible; the winner must
    have a positive combined gain. ``buf`` is scratch space of length >= rows.
    """
    count = end - start
    denom = h_tot + l2
    if denom <= 0.0 or count < 2 * min_leaf:
        return -1, -1
    parent = g_tot * g_tot / denom
    tol = _GAIN_RTOL * max(1.0, parent)
    best = tol
    best_f = -1
    best_t = -1
    for f in range(bins.shape[1]):
        prev_cl = -1
        for t in range(n_bins[f] - 1):
            gl = 0.0
            hl = 0.0
            cl = 0
            for k in range(start, end):
                r = idx[k]
                if bins[r, f] <= t:
                    gl += grad[r]
                    hl += hess[r]
                    cl += 1
            if cl == prev_cl:
                continue
            prev_cl = cl
            if cl < min_leaf:
                continue
            if count - cl < min_leaf:
                break
            dl = hl + l2
            dr = (h_tot - hl) + l2
            if dl <= 0.0 or dr <= 0.0:
                continue
            gr = g_tot - gl
            gain = gl * gl / dl + gr * gr / dr - parent
            if gain < -tol:
                continue
            nl = 0
            nr = cl
            for k in range(start, end):
                r = idx[k]
                if bins[r, f] <= t:
                    buf[nl] = r
                    nl += 1
                else:
                    buf[nr] = r
                    nr += 1
            lf, lt, lgain = _node_split(bins, grad, hess, buf, 0, cl, n_bins, l2, min_leaf, gl, hl)
            rf, rt, rgain = _node_split(bins, grad, hess, buf, cl, count, n_bins, l2, min_leaf, gr, h_tot - hl)
            total = gain + lgain + rgain
            if total > best:
                best = total
                best_f = f
                best_t = t
    return best_f, best_t


@njit(cache=True)
def _grow(bins, grad, hess, idx, n_bins, max_depth, min_leaf, l2):
    max_nodes = 2 ** (max_depth + 1) - 1
    feature = np.full(max_nodes, -1, np.int32)
    threshold = np.full(max_nodes, -1, np.int32)
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    value = np.zeros(max_nodes)
    cover = np.zeros(max_nodes)
    n = idx.shape[0]
    row_leaf = np.zeros(bins.shape[0], np.int32)
    tmp = np.empty(n, idx.dtype)

    s_node = np.empty(max_nodes, np.int64)
    s_start = np.empty(max_nodes, np.int64)
    s_end = np.empty(max_nodes, np.int64)
    s_depth = np.empty(max_nodes, np.int64)
    sp = 0
    s_node[0] = 0
    s_start[0] = 0
    s_end[0] = n
    s_depth[0] = 0
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = s_node[sp]
        start = s_start[sp]
        end = s_end[sp]
        depth = s_depth[sp]
        g_tot, h_tot = _sum_gh(grad, hess, idx, start, end)
        cover[node] = end - start
        value[node] = -g_tot / (h_tot + l2) if h_tot + l2 > 0.0 else 0.0
        f = -1
        t = -1
        if depth < max_depth:
            f, t, _ = _node_split(bins, grad, hess, idx, start, end, n_bins, l2, min_leaf, g_tot, h_tot)
            if f < 0 and depth + 1 < max_depth:
                f, t = _lookahead_split(bins, grad, hess, idx, start, end, n_bins, l2, min_leaf, g_tot, h_tot, tmp)
        if f < 0:
            for k in range(start, end):
                row_leaf[idx[k]] = node
            continue
        nl = 0
        for k in range(start, end):
            if bins[idx[k], f] <= t:
                tmp[nl] = idx[k]
                nl += 1
        nr = nl
        for k in range(start, end):
            if bins[idx[k], f] > t:
                tmp[nr] = idx[k]
                nr += 1
        for k in range(end - start):
            idx[start + k] = tmp[k]
        mid = start + nl
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = f
        threshold[node] = t
        left[node] = lc
        right[node] = rc
        s_node[sp] = rc
        s_start[sp] = mid
        s_end[sp] = end
        s_depth[sp] = depth + 1
        sp += 1
        s_node[sp] = lc
        s_start[sp] = start
        s_end[sp] = mid
        s_depth[sp] = depth + 1
        sp += 1
    return feature, threshold, left, right, value, cover, n_nodes, row_leaf


@njit(cache=True)
def _sigmoid(m):
    if m >= 0.0:
        return 1.0 / (1.0 + math.exp(-m))
    e = math.exp(m)
    return e / (1.0 + e)


@njit(cache=True)
def _boost(bins, y, n_bins, iterations, lr, max_depth, min_leaf, l2, base):
    n = bins.shape[0]
    max_nodes = 2 ** (max_depth + 1) - 1
    feat = np.full((iterations, max_nodes), -1, np.int32)
    thr = np.full((iterations, max_nodes), -1, np.int32)
    lft = np.full((iterations, max_nodes), -1, np.int32)
    rgt = np.full((iterations, max_nodes), -1, np.int32)
    val = np.zeros((iterations, max_nodes))
    cov = np.zeros((iterations, max_nodes))
    counts = np.zeros(iterations, np.int64)
    margin = np.full(n, base)
    grad = np.empty(n)
    hess = np.empty(n)
    idx = np.arange(n)
    for it in range(iterations):
        for r in range(n):
            p = _sigmoid(margin[r])
            grad[r] = p - y[r]
            hess[r] = p * (1.0 - p)
        for r in range(n):
            idx[r] = r
        f, t, lc, rc, v, c, nn, row_leaf = _grow(bins, grad, hess, idx, n_bins, max_depth, min_leaf, l2)
        feat[it] = f
        thr[it] = t
        lft[it] = lc
        rgt[it] = rc
        val[it] = v
        cov[it] = c
        counts[it] = nn
        for r in range(n):
            margin[r] += lr * v[row_leaf[r]]
    return feat, thr, lft, rgt, val, cov, counts


@njit(cache=True)
def _leaf_values(feat, thr, lft, rgt, val, bins):
    n_trees = feat.shape[0]
    n = bins.shape[0]
    out = np.empty((n, n_trees))
    for r in range(n):
        for t in range(n_trees):
            node = 0
            while lft[t, node] >= 0:
                if bins[r, feat[t, node]] <= thr[t, node]:
                    node = lft[t, node]
                else:
                    node = rgt[t, node]
            out[r, t] = val[t, node]
    return out


# -- model objects --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Tree:
    """Node arrays; ``left[i] == -1`` marks a leaf. ``cover`` counts training rows."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)

    @cached_property
    def depth(self) -> int:
        def d(node):
            if self.left[node] < 0:
                return 0
            return 1 + max(d(self.left[node]), d(self.right[node]))

        return d(0)

    def leaf_index(self, bins: np.ndarray) -> np.ndarray:
        bins = np.atleast_2d(bins)
        node = np.zeros(bins.shape[0], dtype=np.intp)
        rows = np.arange(bins.shape[0])
        for _ in range(self.n_nodes):
            inner = self.left[node] >= 0
            if not inner.any():
                break
            go_left = bins[rows, np.maximum(self.feature[node], 0)] <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(inner, nxt, node)
        return node

    def predict(self, bins: np.ndarray) -> np.ndarray:
        return self.value[self.leaf_index(bins)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "cover": self.cover.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int32),
            threshold=np.asarray(d["threshold"], dtype=np.int32),
            left=np.asarray(d["left"], dtype=np.int32),
            right=np.asarray(d["right"], dtype=np.int32),
            value=np.asarray(d["value"], dtype=np.float64),
            cover=np.asarray(d["cover"], dtype=np.float64),
        )

    @classmethod
    def leaf(cls, value: float, cover: float) -> "Tree":
        neg = np.array([-1], dtype=np.int32)
        return cls(neg, neg.copy(), neg.copy(), neg.copy(), np.array([float(value)]), np.array([float(cover)]))


@dataclass(frozen=True, eq=False)
class Ensemble:
    base_score: float
    learning_rate: float
    trees: tuple[Tree, ...]
    feature_names: tuple[str, ...]
    params: TrainParams = field(default_factory=TrainParams)
    preprocessor: Preprocessor | None = None
    degenerate: bool = False

    def __post_init__(self):
        m = len(self.feature_names)
        for t in self.trees:
            inner = t.left >= 0
            if inner.any() and t.feature[inner].max() >= m:
                raise ValueError("tree references a feature beyond the feature list")
        if self.preprocessor is not None and self.preprocessor.feature_names != tuple(self.feature_names):
            raise ValueError("preprocessor features do not match the ensemble features")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @cached_property
    def _stacked(self):
        width = max((t.n_nodes for t in self.trees), default=1)
        k = len(self.trees)
        feat = np.full((k, width), -1, np.int32)
        thr = np.full((k, width), -1, np.int32)
        lft = np.full((k, width), -1, np.int32)
        rgt = np.full((k, width), -1, np.int32)
        val = np.zeros((k, width))
        for i, t in enumerate(self.trees):
            n = t.n_nodes
            feat[i, :n] = t.feature
            thr[i, :n] = t.threshold
            lft[i, :n] = t.left
            rgt[i, :n] = t.right
            val[i, :n] = t.value
        return feat, thr, lft, rgt, val

    def _bins(self, rows) -> np.ndarray:
        bins = rows.bins if isinstance(rows, EncodedMatrix) else np.asarray(rows)
        bins = np.atleast_2d(bins).astype(np.int32, copy=False)
        if bins.shape[1] != self.n_features:
            raise ValueError(f"row arity {bins.shape[1]} does not match ensemble arity {self.n_features}")
        return np.ascontiguousarray(bins)

    def leaf_values(self, rows) -> np.ndarray:
        """(n_rows, n_trees) raw leaf values reached by each row."""
        bins = self._bins(rows)
        if not self.trees:
            return np.zeros((bins.shape[0], 0))
        return _leaf_values(*self._stacked, bins)

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "params": self.params.to_dict(),
            "degenerate": self.degenerate,
            "features": list(self.feature_names),
            "preprocessor": None if self.preprocessor is None else self.preprocessor.to_list(),
            "trees": [t.to_dict() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "Ensemble":
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')!r}")
        pre = d.get("preprocessor")
        return cls(
            base_score=float(d["base_score"]),
            learning_rate=float(d["learning_rate"]),
            trees=tuple(Tree.from_dict(t) for t in d["trees"]),
            feature_names=tuple(d["features"]),
            params=TrainParams.from_dict(d["params"]),
            preprocessor=None if pre is None else Preprocessor.from_list(pre),
            degenerate=bool(d.get("degenerate", False)),
        )


def save_model(ensemble: Ensemble, path: str | Path) -> None:
    Path(path).write_text(ensemble.to_json() + "\n", encoding="utf-8")


def load_model(path: str | Path) -> Ensemble:
    return Ensemble.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- operations -------------------------------------------------------------------


def _as_matrix(matrix) -> np.ndarray:
    bins = matrix.bins if isinstance(matrix, EncodedMatrix) else np.asarray(matrix)
    return np.ascontiguousarray(np.atleast_2d(bins).astype(np.int32, copy=False))


def _n_bins(matrix, bins: np.ndarray) -> np.ndarray:
    if isinstance(matrix, EncodedMatrix):
        return np.asarray(matrix.n_bins, dtype=np.int32)
    if bins.shape[0] == 0:
        return np.ones(bins.shape[1], np.int32)
    return (bins.max(axis=0) + 1).astype(np.int32)


def best_split(rows, matrix, gradients, hessians, params: TrainParams):
    """Best (feature, threshold, gain) for ``rows``, or ``None`` if no split has positive gain.

    Ties go to the lowest feature id, then the lowest threshold.
    """
    bins = _as_matrix(matrix)
    idx = np.asarray(rows, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("row set is empty")
    g = np.asarray(gradients, dtype=np.float64)
    h = np.asarray(hessians, dtype=np.float64)
    g_tot, h_tot = _sum_gh(g, h, idx, 0, idx.size)
    f, t, gain = _node_split(
        bins, g, h, idx, 0, idx.size, _n_bins(matrix, bins),
        params.l2_leaf_regularization, params.min_samples_leaf, g_tot, h_tot,
    )
    if f < 0:
        return None
    return int(f), int(t), float(gain)


def grow_tree(gradients, hessians, matrix, params: TrainParams) -> Tree:
    bins = _as_matrix(matrix)
    g = np.ascontiguousarray(gradients, dtype=np.float64)
    h = np.ascontiguousarray(hessians, dtype=np.float64)
    if g.shape[0] != bins.shape[0] or h.shape[0] != bins.shape[0]:
        raise ValueError("gradient/hessian length does not match matrix rows")
    f, t, lc, rc, v, c, nn, _ = _grow(
        bins, g, h, np.arange(bins.shape[0]), _n_bins(matrix, bins),
        params.max_depth, params.min_samples_leaf, params.l2_leaf_regularization,
    )
    return Tree(f[:nn].copy(), t[:nn].copy(), lc[:nn].copy(), rc[:nn].copy(), v[:nn].copy(), c[:nn].copy())


def base_log_odds(labels) -> float:
    p = float(np.mean(labels))
    p = min(max(p, PROBA_EPS), 1.0 - PROBA_EPS)
    return math.log(p / (1.0 - p))


def fit_ensemble(matrix, labels, params: TrainParams | None = None, preprocessor: Preprocessor | None = None) -> Ensemble:
    """Boost ``params.iterations`` trees on the logistic loss.

    A single-class label vector yields a tree-less ensemble flagged
    ``degenerate`` (with a warning).
    """
    params = params or TrainParams()
    bins = _as_matrix(matrix)
    y = np.asarray(labels, dtype=np.float64)
    if bins.shape[0] != y.shape[0]:
        raise ValueError("matrix rows and label length differ")
    if y.shape[0] < 2:
        raise ValueError("need at least two training rows")
    names = matrix.feature_names if isinstance(matrix, EncodedMatrix) else tuple(f"f{j}" for j in range(bins.shape[1]))
    base = base_log_odds(y)
    if y.min() == y.max():
        warnings.warn("training labels contain a single class; returning base score only", DegenerateLabelsWarning)
        return Ensemble(base, params.learning_rate, (), tuple(names), params, preprocessor, degenerate=True)
    feat, thr, lft, rgt, val, cov, counts = _boost(
        bins, y, _n_bins(matrix, bins), params.iterations, params.learning_rate,
        params.max_depth, params.min_samples_leaf, params.l2_leaf_regularization, base,
    )
    trees = tuple(
        Tree(feat[i, :n].copy(), thr[i, :n].copy(), lft[i, :n].copy(), rgt[i, :n].copy(), val[i, :n].copy(), cov[i, :n].copy())
        for i, n in enumerate(counts)
    )
    return Ensemble(base, params.learning_rate, trees, tuple(names), params, preprocessor)


def predict_margin(ensemble: Ensemble, rows) -> np.ndarray | float:
    """Log-odds output; a 1-D row gives a float, a matrix gives an array."""
    single = not isinstance(rows, EncodedMatrix) and np.asarray(rows).ndim == 1
    leaves = ensemble.leaf_values(rows)
    out = ensemble.base_score + ensemble.learning_rate * leaves.sum(axis=1)
    return float(out[0]) if single else out


def sigmoid(m):
    m = np.asarray(m, dtype=np.float64)
    e = np.exp(-np.abs(m))
    return np.where(m >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def predict_proba(ensemble: Ensemble, rows):
    m = predict_margin(ensemble, rows)
    p = sigmoid(m)
    return float(p) if np.ndim(m) == 0 else p


def staged_margins(ensemble: Ensemble, rows) -> np.ndarray:
    """(n_trees + 1, n_rows) margins after 0, 1, ..., all trees."""
    leaves = ensemble.leaf_values(rows)
    steps = np.cumsum(leaves, axis=1).T * ensemble.learning_rate
    return np.vstack([np.full(leaves.shape[0], ensemble.base_score), ensemble.base_score + steps])


def logloss(labels, margins) -> float:
    y = np.asarray(labels, dtype=np.float64)
    m = np.asarray(margins, dtype=np.float64)
    # log(1 + e^m) - y m, evaluated stably
    return float(np.mean(np.logaddexp(0.0, m) - y * m))
