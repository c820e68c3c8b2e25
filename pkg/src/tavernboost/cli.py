"""Command-line driver for the cohort pipeline.

Modes: generate, train, explain, select, validate, search, score. Each run
writes its artifacts plus ``manifest_<mode>.json`` into the output directory
and exits nonzero, naming the failing stage, if anything goes wrong. Files
written by a failed run are removed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence


from . import __version__, explain, plots, synth
from .gbdt import TrainParams, load_model, save_model
from .metrics import roc_curve
from .schema import Dataset, apply_derivations, load_dataset
from .validation import (
    DEFAULT_PARAM_GRID,
    DEFAULT_THRESHOLD,
    EXPLAIN_DEPTH,
    FoldPlan,
    cross_validate,
    explain_cohort,
    fit_model,
    grid_search,
    score_dataset,
)

log = logging.getLogger("tavernboost")

MODES = ("generate", "train", "explain", "select", "validate", "search", "score")
DEFAULT_SEED = 16017


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass
class RunConfig:
    mode: str
    data: str | None = None
    schema: str | None = None
    model: str | None = None
    out: str = "tavernboost_out"
    spec: str | None = None
    features: str | list | None = None
    ranking: str | None = None
    seed: int = DEFAULT_SEED
    scheme: str = "loocv"
    repeats: int = 5
    k: int = 5
    depth: int | None = None
    iterations: int | None = None
    lr: float | None = None
    l2: float | None = None
    min_leaf: int | None = None
    explain_depth: int = EXPLAIN_DEPTH
    threshold_level: float = 0.05
    threshold: float = DEFAULT_THRESHOLD
    n_jobs: int = 1
    max_bins: int = 255
    param_grid: dict | None = None
    threshold_grid: list | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        needs = {
            "train": ("data", "schema"),
            "explain": ("data", "schema"),
            "validate": ("data", "schema"),
            "search": ("data", "schema"),
            "score": ("data", "schema", "model"),
        }.get(self.mode, ())
        absent = [n for n in needs if getattr(self, n) is None]
        if absent:
            raise ValueError(f"mode {self.mode!r} needs --{' --'.join(absent)}")
        for n in needs:
            if n == "model" and self.mode != "score":
                continue
            if not Path(getattr(self, n)).is_file():
                raise FileNotFoundError(f"--{n} {getattr(self, n)} does not exist")
        for n in ("spec", "ranking"):
            p = getattr(self, n)
            if p is not None and not Path(p).is_file():
                raise FileNotFoundError(f"--{n} {p} does not exist")
        if self.mode == "select" and self.ranking is None and not (Path(self.out) / "ranking.csv").is_file():
            raise FileNotFoundError("select needs --ranking or a ranking.csv in --out")
        if self.scheme not in ("loocv", "kfold"):
            raise ValueError("scheme must be loocv or kfold")

    def train_params(self, **defaults) -> TrainParams:
        base = TrainParams(seed=self.seed, **defaults)
        over = {
            "max_depth": self.depth,
            "iterations": self.iterations,
            "learning_rate": self.lr,
            "l2_leaf_regularization": self.l2,
            "min_samples_leaf": self.min_leaf,
        }
        return replace(base, **{k: v for k, v in over.items() if v is not None})

    def to_dict(self) -> dict:
        return asdict(self)


# -- artifact bookkeeping -------------------------------------------------------------


class Artifacts:
    """Tracks files written by one run so a failure can remove them."""

    def __init__(self, out: Path):
        self.out = out
        self.paths: list[Path] = []

    def path(self, name: str | Path) -> Path:
        p = Path(name)
        p = p if p.is_absolute() or p.parent != Path(".") else self.out / p
        p.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(p)
        return p

    def write_json(self, name, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
        return p

    def remove_all(self) -> None:
        for p in self.paths:
            p.unlink(missing_ok=True)

    def verify(self) -> None:
        """Every artifact must exist and parse as its extension says."""
        import xml.etree.ElementTree as ET

        for p in self.paths:
            if not p.is_file():
                raise FileNotFoundError(f"artifact {p} was not written")
            if p.suffix == ".json":
                json.loads(p.read_text(encoding="utf-8"))
            elif p.suffix == ".csv":
                with open(p, encoding="utf-8", newline="") as fh:
                    rows = list(csv.reader(fh))
                if not rows or any(len(r) != len(rows[0]) for r in rows):
                    raise ValueError(f"artifact {p} is not a rectangular CSV")
            elif p.suffix == ".svg":
                ET.parse(p)


def sha256_of(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _inputs(cfg: RunConfig) -> dict[str, str]:
    out = {}
    for n in ("data", "schema", "spec", "ranking"):
        p = getattr(cfg, n)
        if p is not None and Path(p).is_file():
            out[n] = sha256_of(p)
    if cfg.mode == "score":
        out["model"] = sha256_of(cfg.model)
    if isinstance(cfg.features, str) and Path(cfg.features).is_file():
        out["features"] = sha256_of(cfg.features)
    return out


# -- shared steps ---------------------------------------------------------------------


def _load(cfg: RunConfig, require_label: bool = True) -> Dataset:
    with stage("load"):
        ds = load_dataset(cfg.data, cfg.schema, require_label=require_label)
    with stage("derive"):
        return apply_derivations(ds)


def _features(cfg: RunConfig, dataset: Dataset) -> list[str] | None:
    """Feature subset from a list, a JSON file (list or {"features": [...]}), or comma names."""
    spec = cfg.features
    if spec is None:
        return None
    if isinstance(spec, str):
        if Path(spec).is_file():
            obj = json.loads(Path(spec).read_text(encoding="utf-8"))
            spec = obj["features"] if isinstance(obj, dict) else obj
        else:
            spec = [s.strip() for s in spec.split(",") if s.strip()]
    unknown = [f for f in spec if f not in dataset.feature_names]
    if unknown:
        raise ValueError(f"unknown features requested: {unknown}")
    return list(spec)


def _plan(cfg: RunConfig, n_rows: int) -> FoldPlan:
    if cfg.scheme == "loocv":
        return FoldPlan.loocv(n_rows, cfg.repeats, cfg.seed)
    return FoldPlan.kfold(n_rows, cfg.k, cfg.repeats, cfg.seed)


# -- modes ----------------------------------------------------------------------------


def _run_generate(cfg: RunConfig, art: Artifacts) -> None:
    with stage("generate"):
        spec = synth.load_synth_spec(cfg.spec)
        ds = synth.generate(spec, cfg.seed)
    with stage("write"):
        csv_path, schema_path = synth.write_cohort(ds, art.out)
        art.paths += [csv_path, schema_path]


def _run_train(cfg: RunConfig, art: Artifacts) -> None:
    ds = _load(cfg)
    with stage("train"):
        model = fit_model(ds, None, cfg.train_params(), _features(cfg, ds), max_bins=cfg.max_bins)
    with stage("write"):
        save_model(model, art.path(cfg.model or "model.json"))


def _run_explain(cfg: RunConfig, art: Artifacts) -> None:
    ds = _load(cfg)
    with stage("explain"):
        params = cfg.train_params(max_depth=cfg.explain_depth)
        if cfg.depth is not None:
            params = replace(params, max_depth=cfg.depth)
        res = explain_cohort(ds, _features(cfg, ds), params)
        rows = explain.summary_export(res.shap, ds, res.ranking)
    with stage("write"):
        save_model(res.model, art.path(cfg.model or "explain_model.json"))
        explain.write_ranking_csv(res.ranking, art.path("ranking.csv"))
        _write_ranking_by_name(res.ranking, art.path("ranking_by_name.csv"))
        explain.write_summary_csv(rows, art.path("beeswarm.csv"))
        plots.write_svg(plots.beeswarm_svg(rows, res.ranking.names, cfg.seed), art.path("beeswarm.svg"))
        plots.write_svg(plots.importance_svg(res.ranking.names, list(res.ranking.values)), art.path("importance.svg"))


def _write_ranking_by_name(ranking: explain.ImportanceRanking, path: Path) -> None:
    """Same rows as ranking.csv, listed alphabetically; ``rank`` stays the importance rank."""
    ranked = {name: (r, v) for r, (name, v) in enumerate(ranking, start=1)}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "phi_bar", "rank"])
        for name in sorted(ranked):
            r, v = ranked[name]
            w.writerow([name, repr(v), r])


def _run_select(cfg: RunConfig, art: Artifacts) -> None:
    with stage("load"):
        ranking = explain.read_ranking_csv(cfg.ranking or Path(cfg.out) / "ranking.csv")
    with stage("select"):
        cut = explain.threshold_for_level(ranking, cfg.threshold_level)
        kept = explain.select_features(ranking, cut)
    with stage("write"):
        explain.write_ranking_csv(ranking, art.path("selection.csv"), retained=kept)
        art.write_json("selected_features.json", {
            "threshold_level": cfg.threshold_level,
            "threshold": cut,
            "features": kept,
        })


def _run_validate(cfg: RunConfig, art: Artifacts) -> None:
    ds = _load(cfg)
    with stage("validate"):
        report = cross_validate(
            ds, _plan(cfg, ds.n_rows), cfg.train_params(), _features(cfg, ds),
            threshold=cfg.threshold, n_jobs=cfg.n_jobs, max_bins=cfg.max_bins,
        )
        curves = [roc_curve(s, report.labels) for s in report.oof_scores]
    with stage("write"):
        art.write_json("report.json", report.to_dict())
        with open(art.path("roc.csv"), "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["repeat", "fpr", "tpr", "threshold"])
            for r, c in enumerate(curves):
                for x, y, t in zip(c.fpr, c.tpr, c.thresholds):
                    w.writerow([r, repr(float(x)), repr(float(y)), repr(float(t))])
        with open(art.path("oof_scores.csv"), "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "label"] + [f"repeat_{r}" for r in range(len(report.oof_scores))])
            for i in range(ds.n_rows):
                w.writerow([i, int(report.labels[i])] + [repr(float(s[i])) for s in report.oof_scores])
        plots.write_svg(plots.roc_svg(curves[0].fpr, curves[0].tpr, report.mean("auc")), art.path("roc.svg"))
    log.info("validate: %s", report.summary())


def _run_search(cfg: RunConfig, art: Artifacts) -> None:
    ds = _load(cfg)
    with stage("search"):
        ranking = explain.read_ranking_csv(cfg.ranking) if cfg.ranking else None
        grid = cfg.param_grid or {k: list(v) for k, v in DEFAULT_PARAM_GRID.items()}
        levels = cfg.threshold_grid or list(explain.DEFAULT_THRESHOLD_LEVELS)
        res = grid_search(ds, grid, levels, _plan(cfg, ds.n_rows), ranking, cfg.n_jobs, cfg.train_params())
    with stage("write"):
        art.write_json("search_report.json", res.to_dict())


def _run_score(cfg: RunConfig, art: Artifacts) -> None:
    ds = _load(cfg, require_label=False)
    with stage("score"):
        model = load_model(cfg.model)
        probs = score_dataset(model, ds)
    with stage("write"):
        with open(art.path("scores.csv"), "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "probability"])
            for i, p in enumerate(probs):
                w.writerow([i, repr(float(p))])


_RUNNERS = {
    "generate": _run_generate,
    "train": _run_train,
    "explain": _run_explain,
    "select": _run_select,
    "validate": _run_validate,
    "search": _run_search,
    "score": _run_score,
}


def run_pipeline(cfg: RunConfig) -> list[Path]:
    """Run one mode; returns the artifact paths, or raises :class:`StageError`."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    art = Artifacts(out)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            _RUNNERS[cfg.mode](cfg, art)
        with stage("write"):
            art.write_json(f"manifest_{cfg.mode}.json", {
                "mode": cfg.mode,
                "version": __version__,
                "seed": cfg.seed,
                "config": cfg.to_dict(),
                "inputs": _inputs(cfg),
                "artifacts": [p.name for p in art.paths],
            })
            art.verify()
    except BaseException:
        art.remove_all()
        raise
    return art.paths


# -- argument parsing -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tavernboost", description=__doc__.splitlines()[0])
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", help="JSON file of RunConfig fields; flags override it")
    p.add_argument("--data", help="cohort CSV")
    p.add_argument("--schema", help="schema JSON")
    p.add_argument("--model", help="model JSON (written by train/explain, read by score)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--spec", help="synthetic cohort spec JSON (generate); default is the bundled one")
    p.add_argument("--features", help="feature subset: JSON file or comma-separated names")
    p.add_argument("--ranking", help="ranking CSV (select, search)")
    p.add_argument("--seed", type=int)
    p.add_argument("--scheme", choices=("loocv", "kfold"))
    p.add_argument("--repeats", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--min-leaf", dest="min_leaf", type=int)
    p.add_argument("--threshold-level", dest="threshold_level", type=float)
    p.add_argument("--threshold", type=float, help="decision threshold on probabilities")
    p.add_argument("--n-jobs", dest="n_jobs", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        values.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for name in known:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return RunConfig(**values)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with stage("config"):
            cfg = config_from_args(args)
        paths = run_pipeline(cfg)
    except StageError as exc:
        print(f"tavernboost: error {exc}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
