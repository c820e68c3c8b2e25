"""Preliminary encoding stage: recurrence counts for categoricals, histogram bins for numerics.

Missing values are treated asymmetrically on purpose:

* categorical: a missing cell is just another instance and is encoded by
  how often it occurred in the fitting rows;
* numerical: a missing cell goes to the reserved bin 0, below every real
  value, so any threshold split isolates it on the left.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .schema import Column, Dataset, FeatureKind

DEFAULT_MAX_BINS = 255


class _MissingType:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "MISSING"

    def __reduce__(self):
        return (_MissingType, ())


MISSING = _MissingType()


def _fit_rows(fit_rows, n: int) -> np.ndarray:
    rows = np.arange(n) if fit_rows is None else np.asarray(fit_rows, dtype=np.intp)
    if rows.size == 0:
        raise ValueError("fit_rows is empty; no statistics to fit")
    return rows


@dataclass(frozen=True)
class CategoricalEncoder:
    """Instance -> occurrence count over the fitting rows (``MISSING`` included)."""

    feature: str
    counts: dict

    def __getitem__(self, instance) -> int:
        return self.counts.get(instance, 0)

    def to_dict(self) -> dict:
        return {
            "counts": {k: v for k, v in self.counts.items() if k is not MISSING},
            "missing": self.counts.get(MISSING, 0),
        }

    @classmethod
    def from_dict(cls, feature: str, d: dict) -> "CategoricalEncoder":
        counts = {str(k): int(v) for k, v in d["counts"].items()}
        if d.get("missing", 0):
            counts[MISSING] = int(d["missing"])
        return cls(feature, counts)


def fit_categorical_encoder(
    values: Sequence, missing: Sequence[bool], fit_rows=None, feature: str = ""
) -> CategoricalEncoder:
    values = np.asarray(values, dtype=object)
    missing = np.asarray(missing, dtype=bool)
    rows = _fit_rows(fit_rows, len(values))
    tally: dict = {}
    n_missing = 0
    for r in rows:
        if missing[r]:
            n_missing += 1
        else:
            key = str(values[r])
            tally[key] = tally.get(key, 0) + 1
    counts = {k: tally[k] for k in sorted(tally)}
    if n_missing:
        counts[MISSING] = n_missing
    return CategoricalEncoder(feature, counts)


def encode_categorical(encoder: CategoricalEncoder, values: Sequence, missing: Sequence[bool]) -> np.ndarray:
    """Replace each cell by its fitted count; unseen instances encode to 0."""
    missing = np.asarray(missing, dtype=bool)
    out = np.empty(len(missing))
    miss_count = encoder.counts.get(MISSING, 0)
    for i, (v, m) in enumerate(zip(values, missing)):
        out[i] = miss_count if m else encoder.counts.get(str(v), 0)
    return out


@dataclass(frozen=True)
class BinMap:
    feature: str
    boundaries: tuple[float, ...]
    has_missing_bin: bool = True

    @property
    def n_bins(self) -> int:
        return len(self.boundaries) + 1 + int(self.has_missing_bin)

    def to_dict(self) -> dict:
        return {"boundaries": list(self.boundaries), "has_missing_bin": self.has_missing_bin}

    @classmethod
    def from_dict(cls, feature: str, d: dict) -> "BinMap":
        return cls(feature, tuple(float(b) for b in d["boundaries"]), bool(d["has_missing_bin"]))


def fit_bins(
    values: Sequence[float],
    missing: Sequence[bool] | None = None,
    fit_rows=None,
    max_bins: int = DEFAULT_MAX_BINS,
    feature: str = "",
    reserve_missing: bool = True,
) -> BinMap:
    """Equal-frequency bin boundaries over the non-missing fitting values.

    With at most ``max_bins`` distinct values every value gets its own bin
    (boundaries at midpoints); otherwise boundaries sit at evenly spaced
    quantiles, deduplicated.
    """
    if max_bins < 2:
        raise ValueError("max_bins must be at least 2")
    values = np.asarray(values, dtype=float)
    missing = np.zeros(len(values), bool) if missing is None else np.asarray(missing, dtype=bool)
    rows = _fit_rows(fit_rows, len(values))
    present = values[rows][~missing[rows]]
    any_missing = bool(missing[rows].any())
    has_missing = reserve_missing or any_missing
    if present.size == 0:
        return BinMap(feature, (), True)
    distinct = np.unique(present)
    if distinct.size <= max_bins:
        bounds = (distinct[:-1] + distinct[1:]) / 2.0
    else:
        qs = np.linspace(0.0, 100.0, max_bins + 1)[1:-1]
        bounds = np.unique(np.percentile(present, qs, method="midpoint"))
    return BinMap(feature, tuple(float(b) for b in bounds), has_missing)


def apply_bins(binmap: BinMap, values: Sequence[float], missing: Sequence[bool] | None = None) -> np.ndarray:
    """Bin index per cell: 0 for missing, then 1 + #boundaries <= value."""
    values = np.asarray(values, dtype=float)
    missing = np.zeros(len(values), bool) if missing is None else np.asarray(missing, dtype=bool)
    offset = 1 if binmap.has_missing_bin else 0
    idx = np.searchsorted(np.asarray(binmap.boundaries, dtype=float), np.where(missing, 0.0, values), side="right")
    out = (idx + offset).astype(np.int32)
    out[missing] = 0
    return out


@dataclass(frozen=True)
class FeatureTransform:
    """Fitted per-feature pipeline: optional categorical encoder, then bins."""

    name: str
    kind: FeatureKind
    binmap: BinMap
    encoder: CategoricalEncoder | None = None

    def numeric(self, column: Column) -> tuple[np.ndarray, np.ndarray]:
        if self.encoder is not None:
            return encode_categorical(self.encoder, column.values, column.missing), np.zeros(len(column.values), bool)
        return np.asarray(column.values, dtype=float), np.asarray(column.missing)

    def transform(self, column: Column) -> np.ndarray:
        vals, miss = self.numeric(column)
        return apply_bins(self.binmap, vals, miss)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "encoder": None if self.encoder is None else self.encoder.to_dict(),
            "bins": self.binmap.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureTransform":
        name = d["name"]
        enc = d.get("encoder")
        return cls(
            name=name,
            kind=FeatureKind(d["kind"]),
            binmap=BinMap.from_dict(name, d["bins"]),
            encoder=None if enc is None else CategoricalEncoder.from_dict(name, enc),
        )


def fit_transform_for(column: Column, fit_rows=None, max_bins: int = DEFAULT_MAX_BINS) -> FeatureTransform:
    if column.kind is FeatureKind.CATEGORICAL:
        enc = fit_categorical_encoder(column.values, column.missing, fit_rows, column.name)
        counts = encode_categorical(enc, column.values, column.missing)
        bm = fit_bins(counts, None, fit_rows, max_bins, column.name)
        return FeatureTransform(column.name, column.kind, bm, enc)
    if column.kind is FeatureKind.NUMERICAL:
        bm = fit_bins(column.values, column.missing, fit_rows, max_bins, column.name)
        return FeatureTransform(column.name, column.kind, bm)
    raise ValueError(f"column {column.name!r} of kind {column.kind.value} cannot be a model feature")


@dataclass(frozen=True, eq=False)
class EncodedMatrix:
    """Row-major bin indices (int32), one column per feature."""

    bins: np.ndarray
    feature_names: tuple[str, ...]
    n_bins: np.ndarray

    def __post_init__(self):
        if self.bins.ndim != 2 or self.bins.shape[1] != len(self.feature_names):
            raise ValueError("bin matrix shape does not match feature list")

    @property
    def n_rows(self) -> int:
        return self.bins.shape[0]

    def take(self, rows) -> "EncodedMatrix":
        return EncodedMatrix(self.bins[np.asarray(rows, dtype=np.intp)], self.feature_names, self.n_bins)


@dataclass(frozen=True)
class Preprocessor:
    transforms: tuple[FeatureTransform, ...]

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.transforms)

    @classmethod
    def fit(
        cls,
        dataset: Dataset,
        features: Sequence[str] | None = None,
        fit_rows=None,
        max_bins: int = DEFAULT_MAX_BINS,
    ) -> "Preprocessor":
        names = dataset.feature_names if features is None else list(features)
        return cls(tuple(fit_transform_for(dataset.column(n), fit_rows, max_bins) for n in names))

    def transform(self, dataset: Dataset) -> EncodedMatrix:
        bins = np.zeros((dataset.n_rows, len(self.transforms)), dtype=np.int32)
        for j, t in enumerate(self.transforms):
            bins[:, j] = t.transform(dataset.column(t.name))
        n_bins = np.array([t.binmap.n_bins for t in self.transforms], dtype=np.int32)
        return EncodedMatrix(bins, self.feature_names, n_bins)

    def to_list(self) -> list:
        return [t.to_dict() for t in self.transforms]

    @classmethod
    def from_list(cls, items: list) -> "Preprocessor":
        return cls(tuple(FeatureTransform.from_dict(d) for d in items))
