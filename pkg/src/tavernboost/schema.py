"""Typed CSV ingestion and deterministic feature derivations.

A cohort is described by a JSON schema file::

    {
      "label": "DEATH_1Y",
      "anchor": "TAVI_DATE",
      "features": [
        {"name": "HEIGHT", "kind": "Numerical", "unit": "cm"},
        {"name": "BMI", "kind": "Numerical", "unit": "kg/m2",
         "derivation": {"kind": "BmiFromHeightWeight", "inputs": ["HEIGHT", "WEIGHT"]}},
        ...
      ]
    }

Columns carrying a ``derivation`` are not read from the CSV; they are
materialized by :func:`apply_derivations`.
"""

from __future__ import annotations

import csv
import datetime as dt
import graphlib
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NA_TOKENS = frozenset({"", "NA"})
MULTI_SEPARATOR = ";"
EXPANSION_SEPARATOR = "__"


class SchemaError(ValueError):
    """Schema file or header inconsistent with the declared columns."""


class CellError(ValueError):
    """A single CSV cell could not be interpreted."""

    def __init__(self, row: int, column: str, message: str):
        self.row = row
        self.column = column
        super().__init__(f"row {row}, column {column!r}: {message}")


class DerivationError(ValueError):
    """Invalid derivation configuration (cycles, bad references) or inputs."""


class FeatureKind(str, Enum):
    NUMERICAL = "Numerical"
    CATEGORICAL = "Categorical"
    MULTI_ANSWER = "MultiAnswer"
    DATE = "Date"


class RuleKind(str, Enum):
    BMI = "BmiFromHeightWeight"
    DAYS = "DaysRelativeToAnchor"
    LINEAR = "LinearCombination"


@dataclass(frozen=True)
class DerivationRule:
    kind: RuleKind
    inputs: tuple[str, ...]
    coefficients: tuple[float, ...] | None = None
    anchor: str | None = None

    def __post_init__(self):
        if self.kind is RuleKind.BMI and len(self.inputs) != 2:
            raise SchemaError("BmiFromHeightWeight takes (height, weight)")
        if self.kind is RuleKind.DAYS and len(self.inputs) != 1:
            raise SchemaError("DaysRelativeToAnchor takes exactly one event column")
        if self.kind is RuleKind.LINEAR:
            if self.coefficients is None or len(self.coefficients) != len(self.inputs):
                raise SchemaError("LinearCombination needs one coefficient per input")

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind.value, "inputs": list(self.inputs)}
        if self.coefficients is not None:
            out["coefficients"] = list(self.coefficients)
        if self.anchor is not None:
            out["anchor"] = self.anchor
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DerivationRule":
        try:
            kind = RuleKind(d["kind"])
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"bad derivation kind in {d!r}") from exc
        coefs = d.get("coefficients")
        return cls(
            kind=kind,
            inputs=tuple(d.get("inputs", ())),
            coefficients=None if coefs is None else tuple(float(c) for c in coefs),
            anchor=d.get("anchor"),
        )


@dataclass(frozen=True)
class FeatureSchema:
    name: str
    kind: FeatureKind
    unit: str | None = None
    categories: tuple[str, ...] | None = None
    derivation: DerivationRule | None = None
    # consumed columns are dropped once every derivation has run
    consumed: bool = False

    def __post_init__(self):
        if self.kind is FeatureKind.MULTI_ANSWER and not self.categories:
            raise SchemaError(f"MultiAnswer column {self.name!r} needs its category vocabulary")

    def to_dict(self) -> dict:
        out: dict = {"name": self.name, "kind": self.kind.value}
        if self.unit is not None:
            out["unit"] = self.unit
        if self.categories is not None:
            out["categories"] = list(self.categories)
        if self.derivation is not None:
            out["derivation"] = self.derivation.to_dict()
        if self.consumed:
            out["consumed"] = True
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        try:
            kind = FeatureKind(d["kind"])
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"bad feature kind in {d!r}") from exc
        cats = d.get("categories")
        deriv = d.get("derivation")
        return cls(
            name=d["name"],
            kind=kind,
            unit=d.get("unit"),
            categories=None if cats is None else tuple(cats),
            derivation=None if deriv is None else DerivationRule.from_dict(deriv),
            consumed=bool(d.get("consumed", False)),
        )


@dataclass(frozen=True)
class SchemaSet:
    features: tuple[FeatureSchema, ...]
    label: str
    anchor: str | None = None

    def __post_init__(self):
        names = [f.name for f in self.features]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise SchemaError(f"duplicate column names: {sorted(dupes)}")
        if self.label in names:
            raise SchemaError(f"label {self.label!r} must not be declared as a feature")
        known = set(names)
        for f in self.features:
            rule = f.derivation
            if rule is None:
                continue
            refs = list(rule.inputs)
            if rule.kind is RuleKind.DAYS:
                anchor = rule.anchor or self.anchor
                if anchor is None:
                    raise SchemaError(f"{f.name!r}: no anchor column for DaysRelativeToAnchor")
                refs.append(anchor)
            missing = [r for r in refs if r not in known]
            if missing:
                raise SchemaError(f"{f.name!r} derives from unknown columns {missing}")
        if self.anchor is not None and self.anchor not in known:
            raise SchemaError(f"anchor column {self.anchor!r} is not declared")

    def __getitem__(self, name: str) -> FeatureSchema:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def raw_features(self) -> tuple[FeatureSchema, ...]:
        return tuple(f for f in self.features if f.derivation is None)

    @property
    def derived_features(self) -> tuple[FeatureSchema, ...]:
        return tuple(f for f in self.features if f.derivation is not None)

    def to_dict(self) -> dict:
        out: dict = {"label": self.label}
        if self.anchor is not None:
            out["anchor"] = self.anchor
        out["features"] = [f.to_dict() for f in self.features]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SchemaSet":
        if "label" not in d:
            raise SchemaError("schema must name its label column")
        return cls(
            features=tuple(FeatureSchema.from_dict(f) for f in d.get("features", [])),
            label=d["label"],
            anchor=d.get("anchor"),
        )


def load_schema(path: str | Path) -> SchemaSet:
    with open(path, encoding="utf-8") as fh:
        try:
            return SchemaSet.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from exc


def save_schema(schema: SchemaSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, indent=2)
        fh.write("\n")


@dataclass(frozen=True, eq=False)
class Column:
    """One typed column. Masked cells hold a fill value that is never read."""

    schema: FeatureSchema
    values: np.ndarray
    missing: np.ndarray

    @property
    def name(self) -> str:
        return self.schema.name

    @property
    def kind(self) -> FeatureKind:
        return self.schema.kind

    def take(self, rows) -> "Column":
        return Column(self.schema, self.values[rows], self.missing[rows])


def _fill_value(kind: FeatureKind):
    if kind is FeatureKind.NUMERICAL:
        return np.nan
    if kind is FeatureKind.DATE:
        return np.datetime64("NaT", "D")
    return ""


def _empty_values(kind: FeatureKind, n: int) -> np.ndarray:
    if kind is FeatureKind.NUMERICAL:
        return np.full(n, np.nan)
    if kind is FeatureKind.DATE:
        return np.full(n, np.datetime64("NaT", "D"), dtype="datetime64[D]")
    return np.full(n, "", dtype=object)


def make_column(schema: FeatureSchema, values: Sequence, missing: Sequence[bool]) -> Column:
    """Build a column, normalizing masked cells to the kind's fill value."""
    missing = np.asarray(missing, dtype=bool).copy()
    out = _empty_values(schema.kind, len(missing))
    vals = list(values)
    if len(vals) != len(missing):
        raise ValueError(f"{schema.name}: {len(vals)} values but {len(missing)} mask entries")
    for i, (v, m) in enumerate(zip(vals, missing)):
        if not m:
            out[i] = v
    out.setflags(write=False)
    missing.setflags(write=False)
    return Column(schema, out, missing)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-major cohort table with an explicit missing mask and a binary label."""

    columns: tuple[Column, ...]
    label: np.ndarray | None
    label_name: str
    anchor: str | None = None
    pending: tuple[FeatureSchema, ...] = ()
    n_rows: int = field(default=-1)

    def __post_init__(self):
        n = self.n_rows
        if n < 0:
            if self.columns:
                n = len(self.columns[0].values)
            elif self.label is not None:
                n = len(self.label)
            else:
                n = 0
            object.__setattr__(self, "n_rows", n)
        for c in self.columns:
            if len(c.values) != n or len(c.missing) != n:
                raise ValueError(f"column {c.name!r} has {len(c.values)} rows, expected {n}")
        if self.label is not None:
            if len(self.label) != n:
                raise ValueError("label length does not match the table")
            if not np.isin(self.label, (0, 1)).all():
                raise ValueError("label must be binary 0/1")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def feature_names(self) -> list[str]:
        """Columns a model can consume: numerical and categorical ones."""
        return [
            c.name
            for c in self.columns
            if c.kind in (FeatureKind.NUMERICAL, FeatureKind.CATEGORICAL)
        ]

    @property
    def schema(self) -> SchemaSet:
        """Schema describing the materialized columns (derivations stripped)."""
        feats = tuple(replace(c.schema, derivation=None, consumed=False) for c in self.columns)
        return SchemaSet(feats, self.label_name, self.anchor if self.anchor in self.names else None)

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.intp)
        return Dataset(
            columns=tuple(c.take(rows) for c in self.columns),
            label=None if self.label is None else self.label[rows],
            label_name=self.label_name,
            anchor=self.anchor,
            pending=self.pending,
            n_rows=len(rows),
        )

    def with_label(self, label) -> "Dataset":
        label = np.asarray(label, dtype=np.int8)
        return replace(self, label=label)

    def with_column(self, column: Column) -> "Dataset":
        cols = tuple(column if c.name == column.name else c for c in self.columns)
        if column.name not in self.names:
            cols = cols + (column,)
        return replace(self, columns=cols)


def _parse_cell(kind: FeatureKind, text: str, row: int, column: str):
    if kind is FeatureKind.NUMERICAL:
        try:
            v = float(text)
        except ValueError:
            raise CellError(row, column, f"not a number: {text!r}") from None
        if math.isnan(v):
            return None
        if not math.isfinite(v):
            raise CellError(row, column, f"non-finite number: {text!r}")
        return v
    if kind is FeatureKind.DATE:
        try:
            return np.datetime64(dt.date.fromisoformat(text), "D")
        except ValueError:
            raise CellError(row, column, f"not an ISO date: {text!r}") from None
    return text


def load_dataset(
    csv_path: str | Path,
    schema_path: str | Path | SchemaSet,
    *,
    require_label: bool = True,
) -> Dataset:
    """Read a cohort CSV against its schema.

    Empty cells and the literal ``NA`` are marked missing. Derived columns are
    left pending until :func:`apply_derivations`. Row order is preserved.
    """
    schema = schema_path if isinstance(schema_path, SchemaSet) else load_schema(schema_path)
    with open(csv_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{csv_path}: empty file, no header") from None
        records = list(reader)

    declared = {f.name: f for f in schema.features}
    unknown = [h for h in header if h != schema.label and h not in declared]
    if unknown:
        raise SchemaError(f"unknown columns in CSV header: {unknown}")
    derived_in_csv = [h for h in header if h in declared and declared[h].derivation is not None]
    if derived_in_csv:
        raise SchemaError(f"derived columns must not appear in the CSV: {derived_in_csv}")
    absent = [f.name for f in schema.raw_features if f.name not in header]
    if absent:
        raise SchemaError(f"schema columns missing from CSV: {absent}")
    if len(set(header)) != len(header):
        raise SchemaError("duplicate names in CSV header")
    if schema.label not in header and require_label:
        raise SchemaError(f"label column {schema.label!r} missing from CSV")

    pos = {h: i for i, h in enumerate(header)}
    n = len(records)
    for r, rec in enumerate(records, start=1):
        if len(rec) != len(header):
            raise CellError(r, "*", f"expected {len(header)} fields, found {len(rec)}")

    columns = []
    for f in schema.raw_features:
        j = pos[f.name]
        vals, miss = [], np.zeros(n, dtype=bool)
        for r, rec in enumerate(records):
            text = rec[j]
            parsed = None if text in NA_TOKENS else _parse_cell(f.kind, text, r + 1, f.name)
            if parsed is None:
                miss[r] = True
            vals.append(parsed)
        columns.append(make_column(f, vals, miss))

    label = None
    if schema.label in pos:
        j = pos[schema.label]
        label = np.zeros(n, dtype=np.int8)
        for r, rec in enumerate(records):
            text = rec[j].strip()
            if text in NA_TOKENS:
                raise CellError(r + 1, schema.label, "label is missing")
            if text not in ("0", "1"):
                raise CellError(r + 1, schema.label, f"label must be 0 or 1, got {text!r}")
            label[r] = int(text)

    return Dataset(
        columns=tuple(columns),
        label=label,
        label_name=schema.label,
        anchor=schema.anchor,
        pending=schema.derived_features + tuple(f for f in schema.raw_features if f.consumed),
        n_rows=n,
    )


def _format_cell(column: Column, i: int) -> str:
    if column.missing[i]:
        return ""
    v = column.values[i]
    if column.kind is FeatureKind.NUMERICAL:
        return repr(float(v))
    if column.kind is FeatureKind.DATE:
        return str(v)
    return str(v)


def write_dataset(dataset: Dataset, csv_path: str | Path) -> None:
    """Write the materialized columns (plus label) with empty cells for missing."""
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = dataset.names + ([dataset.label_name] if dataset.label is not None else [])
        w.writerow(header)
        for i in range(dataset.n_rows):
            row = [_format_cell(c, i) for c in dataset.columns]
            if dataset.label is not None:
                row.append(str(int(dataset.label[i])))
            w.writerow(row)


# -- derivations -------------------------------------------------------------


def derive_bmi(height_cm, weight_kg):
    """Body mass index in kg/m^2; ``None``/NaN inputs propagate as missing."""
    if height_cm is None or weight_kg is None:
        return None
    if (isinstance(height_cm, float) and math.isnan(height_cm)) or (
        isinstance(weight_kg, float) and math.isnan(weight_kg)
    ):
        return None
    if height_cm <= 0 or weight_kg <= 0:
        raise DerivationError(f"height and weight must be positive, got {height_cm}, {weight_kg}")
    return weight_kg / (height_cm / 100.0) ** 2


def relativize_date(event, anchor) -> int | None:
    """Signed whole days from ``anchor`` to ``event`` (earlier events are negative)."""
    if anchor is None or (isinstance(anchor, np.datetime64) and np.isnat(anchor)):
        raise DerivationError("anchor date is missing")
    if event is None or (isinstance(event, np.datetime64) and np.isnat(event)):
        return None
    ev = np.datetime64(event, "D")
    an = np.datetime64(anchor, "D")
    return int((ev - an).astype(np.int64))


def expand_multi_answer(column: Column, vocabulary: Sequence[str] | None = None) -> list[Column]:
    """One-hot expand a ``;``-separated multi-answer column.

    Produces one 0/1 numerical column ``<base>__<category>`` per vocabulary
    entry; a missing cell yields missing in every indicator.
    """
    vocab = tuple(vocabulary if vocabulary is not None else column.schema.categories or ())
    if not vocab:
        raise SchemaError(f"{column.name!r}: empty vocabulary")
    n = len(column.values)
    index = {c: k for k, c in enumerate(vocab)}
    ind = np.zeros((n, len(vocab)))
    for i in range(n):
        if column.missing[i]:
            continue
        for ans in str(column.values[i]).split(MULTI_SEPARATOR):
            ans = ans.strip()
            if not ans:
                continue
            if ans not in index:
                raise CellError(i + 1, column.name, f"answer {ans!r} not in vocabulary")
            ind[i, index[ans]] = 1.0
    out = []
    for k, cat in enumerate(vocab):
        fs = FeatureSchema(f"{column.name}{EXPANSION_SEPARATOR}{cat}", FeatureKind.NUMERICAL)
        out.append(make_column(fs, ind[:, k], column.missing))
    return out


def _derive_column(rule: DerivationRule, target: FeatureSchema, cols: dict, anchor: str | None) -> Column:
    srcs = [cols[name] for name in rule.inputs]
    n = len(srcs[0].values)
    vals: list = [None] * n
    if rule.kind is RuleKind.BMI:
        h, w = srcs
        for i in range(n):
            if h.missing[i] or w.missing[i]:
                continue
            try:
                vals[i] = derive_bmi(float(h.values[i]), float(w.values[i]))
            except DerivationError as exc:
                raise CellError(i + 1, target.name, str(exc)) from None
    elif rule.kind is RuleKind.DAYS:
        (ev,) = srcs
        an = cols[rule.anchor or anchor]
        for i in range(n):
            if an.missing[i]:
                raise CellError(i + 1, an.name, "procedure (anchor) date is missing")
            if not ev.missing[i]:
                vals[i] = float(relativize_date(ev.values[i], an.values[i]))
    else:
        coefs = rule.coefficients
        for i in range(n):
            if any(s.missing[i] for s in srcs):
                continue
            vals[i] = float(sum(c * float(s.values[i]) for c, s in zip(coefs, srcs)))
    miss = [v is None for v in vals]
    return make_column(replace(target, derivation=None, consumed=False), vals, miss)


def apply_derivations(dataset: Dataset) -> Dataset:
    """Materialize derived columns, expand multi-answer columns, drop consumed ones.

    Rules may depend on other derived columns; they run in dependency order.
    Returns ``dataset`` itself when there is nothing to do.
    """
    multi = [c for c in dataset.columns if c.kind is FeatureKind.MULTI_ANSWER]
    if not dataset.pending and not multi:
        return dataset
    derived = [f for f in dataset.pending if f.derivation is not None]
    consumed = {f.name for f in dataset.pending if f.consumed}
    by_name = {f.name: f for f in derived}

    graph = graphlib.TopologicalSorter()
    for f in derived:
        deps = set(f.derivation.inputs)
        if f.derivation.kind is RuleKind.DAYS:
            deps.add(f.derivation.anchor or dataset.anchor)
        graph.add(f.name, *(d for d in deps if d in by_name))
    try:
        order = list(graph.static_order())
    except graphlib.CycleError as exc:
        raise DerivationError(f"cycle among derivations: {exc.args[1]}") from None

    cols = {c.name: c for c in dataset.columns}
    out = list(dataset.columns)
    for name in order:
        f = by_name[name]
        if f.consumed:
            consumed.add(f.name)
        missing_src = [s for s in f.derivation.inputs if s not in cols]
        if missing_src:
            raise DerivationError(f"{name!r}: unresolved inputs {missing_src}")
        col = _derive_column(f.derivation, f, cols, dataset.anchor)
        cols[name] = col
        out.append(col)

    final: list[Column] = []
    for c in out:
        if c.name in consumed:
            continue
        if c.kind is FeatureKind.MULTI_ANSWER:
            final.extend(expand_multi_answer(c))
        else:
            final.append(c)
    return Dataset(
        columns=tuple(final),
        label=dataset.label,
        label_name=dataset.label_name,
        anchor=dataset.anchor,
        pending=(),
        n_rows=dataset.n_rows,
    )


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Cell-identical comparison: same names, kinds, masks and unmasked values."""
    if a.names != b.names or a.n_rows != b.n_rows:
        return False
    if (a.label is None) != (b.label is None):
        return False
    if a.label is not None and not np.array_equal(a.label, b.label):
        return False
    for ca, cb in zip(a.columns, b.columns):
        if ca.kind is not cb.kind or not np.array_equal(ca.missing, cb.missing):
            return False
        keep = ~ca.missing
        if ca.kind is FeatureKind.NUMERICAL:
            if not np.array_equal(ca.values[keep], cb.values[keep]):
                return False
        elif list(ca.values[keep]) != list(cb.values[keep]):
            return False
    return True


def iter_rows(dataset: Dataset, names: Iterable[str]):
    cols = [dataset.column(n) for n in names]
    for i in range(dataset.n_rows):
        yield [None if c.missing[i] else c.values[i] for c in cols]
