"""Synthetic cohorts drawn from per-class marginal statistics.

Numerical features are truncated normals per class, categorical features are
exact per-class instance counts in random order, and missing cells are
scattered uniformly within each class so that the declared sample sizes hold
exactly. No correlation structure is injected; the label signal comes only
from the class-conditional differences of the marginals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .schema import Dataset, FeatureKind, FeatureSchema, make_column, save_schema, write_dataset

BUNDLED_SPEC = "tavi_cohort.json"
_MAX_REDRAWS = 100


class SynthSpecError(ValueError):
    pass


@dataclass(frozen=True)
class NumericMarginal:
    mean: float
    sd: float
    n: int


@dataclass(frozen=True)
class CategoricalMarginal:
    counts: dict

    @property
    def n(self) -> int:
        return sum(self.counts.values())


@dataclass(frozen=True)
class SynthFeature:
    name: str
    kind: FeatureKind
    per_class: tuple
    unit: str | None = None
    bounds: tuple[float, float] | None = None
    decimals: int | None = None
    signal: bool = True
    description: str | None = None

    @property
    def categories(self) -> tuple[str, ...] | None:
        if self.kind is not FeatureKind.CATEGORICAL:
            return None
        seen: dict[str, None] = {}
        for m in self.per_class:
            seen.update(dict.fromkeys(m.counts))
        return tuple(seen)


@dataclass(frozen=True)
class SynthSpec:
    label: str
    n_per_class: tuple[int, int]
    features: tuple[SynthFeature, ...]
    seed: int = 16017

    def __post_init__(self):
        if len(self.n_per_class) != 2 or min(self.n_per_class) < 0:
            raise SynthSpecError("n_per_class must be two nonnegative counts")
        for f in self.features:
            if len(f.per_class) != 2:
                raise SynthSpecError(f"{f.name}: need one marginal per class")
            for size, m in zip(self.n_per_class, f.per_class):
                if m.n > size:
                    raise SynthSpecError(f"{f.name}: sample size {m.n} exceeds class size {size}")
                if isinstance(m, NumericMarginal) and m.sd < 0:
                    raise SynthSpecError(f"{f.name}: negative SD")
                if isinstance(m, CategoricalMarginal) and any(c < 0 for c in m.counts.values()):
                    raise SynthSpecError(f"{f.name}: negative instance count")

    def missing_counts(self, name: str) -> tuple[int, int]:
        f = next(f for f in self.features if f.name == name)
        return tuple(size - m.n for size, m in zip(self.n_per_class, f.per_class))


def _feature_from_dict(d: dict) -> SynthFeature:
    kind = FeatureKind(d["kind"])
    per_class = []
    for c in d["classes"]:
        if kind is FeatureKind.NUMERICAL:
            per_class.append(NumericMarginal(float(c["mean"]), float(c["sd"]), int(c["n"])))
        elif kind is FeatureKind.CATEGORICAL:
            m = CategoricalMarginal({str(k): int(v) for k, v in c["counts"].items()})
            if "n" in c and int(c["n"]) != m.n:
                raise SynthSpecError(f"{d['name']}: sample size {c['n']} disagrees with counts ({m.n})")
            per_class.append(m)
        else:
            raise SynthSpecError(f"{d['name']}: cannot synthesize {kind.value} features")
    bounds = d.get("bounds")
    return SynthFeature(
        name=d["name"],
        kind=kind,
        per_class=tuple(per_class),
        unit=d.get("unit"),
        bounds=None if bounds is None else (float(bounds[0]), float(bounds[1])),
        decimals=d.get("decimals"),
        signal=bool(d.get("signal", True)),
        description=d.get("description"),
    )


def spec_from_dict(d: dict) -> SynthSpec:
    try:
        return SynthSpec(
            label=d["label"],
            n_per_class=tuple(int(n) for n in d["n_per_class"]),
            features=tuple(_feature_from_dict(f) for f in d["features"]),
            seed=int(d.get("seed", 16017)),
        )
    except KeyError as exc:
        raise SynthSpecError(f"missing field {exc}") from None


def load_synth_spec(path: str | Path | None = None) -> SynthSpec:
    """Read a spec file; ``None`` loads the bundled TAVI cohort marginals."""
    if path is None:
        text = resources.files("tavernboost.data").joinpath(BUNDLED_SPEC).read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return spec_from_dict(json.loads(text))


def _borrowed(f: SynthFeature, n_target: int):
    """Class-0 shape at the class-1 sample size, for features flagged uninformative."""
    ref = f.per_class[0]
    if isinstance(ref, NumericMarginal):
        return NumericMarginal(ref.mean, ref.sd, n_target)
    total = ref.n
    if total == 0:
        return CategoricalMarginal({k: 0 for k in ref.counts})
    raw = {k: v * n_target / total for k, v in ref.counts.items()}
    counts = {k: int(np.floor(v)) for k, v in raw.items()}
    short = n_target - sum(counts.values())
    # largest remainders first, ties by declaration order
    for k in sorted(raw, key=lambda k: -(raw[k] - counts[k]))[:short]:
        counts[k] += 1
    return CategoricalMarginal(counts)


def _draw_numeric(rng: np.random.Generator, m: NumericMarginal, bounds, decimals) -> np.ndarray:
    if m.sd == 0:
        vals = np.full(m.n, m.mean)
    else:
        vals = rng.normal(m.mean, m.sd, m.n)
        if bounds is not None:
            lo, hi = bounds
            for _ in range(_MAX_REDRAWS):
                bad = (vals < lo) | (vals > hi)
                if not bad.any():
                    break
                vals[bad] = rng.normal(m.mean, m.sd, int(bad.sum()))
            vals = np.clip(vals, lo, hi)
    if decimals is not None:
        vals = np.round(vals, decimals)
    return vals


def generate(spec: SynthSpec, seed: int | None = None) -> Dataset:
    """Draw one cohort; identical (spec, seed) gives identical data."""
    seed = spec.seed if seed is None else seed
    sizes = spec.n_per_class
    n = sum(sizes)
    offsets = (0, sizes[0])
    columns = []
    for j, f in enumerate(spec.features):
        kind = f.kind
        values: list = [None] * n
        missing = np.ones(n, dtype=bool)
        for c, size in enumerate(sizes):
            marg = f.per_class[c] if (f.signal or c == 0) else _borrowed(f, f.per_class[c].n)
            rng = np.random.default_rng(np.random.SeedSequence([seed, j, c]))
            present = np.sort(rng.choice(size, size=marg.n, replace=False))
            if isinstance(marg, NumericMarginal):
                drawn = list(_draw_numeric(rng, marg, f.bounds, f.decimals))
            else:
                pool = [k for k, v in marg.counts.items() for _ in range(v)]
                drawn = [pool[i] for i in rng.permutation(len(pool))]
            for pos, v in zip(present, drawn):
                values[offsets[c] + pos] = float(v) if kind is FeatureKind.NUMERICAL else v
                missing[offsets[c] + pos] = False
        schema = FeatureSchema(f.name, kind, unit=f.unit, categories=f.categories)
        columns.append(make_column(schema, values, missing))

    label = np.r_[np.zeros(sizes[0], np.int8), np.ones(sizes[1], np.int8)]
    order = np.random.default_rng(np.random.SeedSequence([seed, len(spec.features), 2])).permutation(n)
    ds = Dataset(columns=tuple(columns), label=label, label_name=spec.label, n_rows=n)
    return ds.take(order)


def write_cohort(dataset: Dataset, out_dir: str | Path, stem: str = "cohort") -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>_schema.json`` loadable by :func:`schema.load_dataset`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    schema_path = out / f"{stem}_schema.json"
    write_dataset(dataset, csv_path)
    save_schema(dataset.schema, schema_path)
    return csv_path, schema_path


def per_class_summary(dataset: Dataset, names: Sequence[str] | None = None) -> dict:
    """Observed mean/SD/sample size or instance counts per class (for checking a draw)."""
    out = {}
    for name in names or dataset.names:
        col = dataset.column(name)
        entry = []
        for c in (0, 1):
            sel = (dataset.label == c) & ~col.missing
            vals = col.values[sel]
            if col.kind is FeatureKind.NUMERICAL:
                entry.append({"mean": float(np.mean(vals)) if vals.size else float("nan"),
                              "sd": float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0,
                              "n": int(vals.size)})
            else:
                uniq, cnt = np.unique(vals.astype(str), return_counts=True)
                entry.append({"counts": dict(zip(uniq.tolist(), cnt.tolist())), "n": int(vals.size)})
        out[name] = entry
    return out
