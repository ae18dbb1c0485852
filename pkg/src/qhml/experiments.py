"""Reproducible experiment driver.

Covers the hyperparameter grid search with repeated stratified k-fold CV, the
held-out comparison of normalization methods, the a/r sweeps, and the data
products behind the distribution and learning-curve figures. Every run draws
its seed from (base seed, drug, config, repeat, fold) so results do not depend
on execution order or worker count. Finished runs are cached on disk, which
makes an interrupted command resumable.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import plotting
from .data import (
    VARIANCE_THRESHOLD, SplitPlan, derive_seed, inner_split, load_dataset, outer_split, stratified_kfold,
    stratify, variance_filter,
)
from .errors import ConfigurationError, UndefinedMetricError
from .metrics import EvalRecord, aggregate_cv, response_auc
from .model import HybridModel, ModelConfig, ModelKind
from .normalization import Kind, NormalizationSpec, fit_label_normalizer, parse_angle
from .quantum import CircuitConfig, Head
from .train import TrainConfig, train

log = logging.getLogger(__name__)

SEARCH_GRID = {"n1": [4, 8], "n2": [2, 4], "n3": [1, 2, 4], "lr": [1e-6, 1e-5, 1e-4]}
A_VALUES = [0.5, 1, 10, 20, 100]
R_VALUES = ["pi/4", "pi/2", "3pi/4", "pi", "3pi/2", "2pi", "4pi", "8pi"]
DEFAULT_A = 20.0
DEFAULT_R = math.pi / 2

# method -> (model kind, interface normalization, measurement head)
METHODS = {
    "classic": (ModelKind.CLASSIC, Kind.IDENTITY, Head.MULTI),
    "identity": (ModelKind.HYBRID, Kind.IDENTITY, Head.MULTI),
    "layernorm": (ModelKind.HYBRID, Kind.LAYERNORM, Head.MULTI),
    "tanh": (ModelKind.HYBRID, Kind.TANH, Head.MULTI),
    "proposed-multi": (ModelKind.HYBRID, Kind.GRADUAL_TANH, Head.MULTI),
    "proposed-single": (ModelKind.HYBRID, Kind.GRADUAL_TANH, Head.SINGLE),
}


class ExperimentAborted(RuntimeError):
    def __init__(self, message, failures):
        super().__init__(message)
        self.failures = failures


@dataclass(frozen=True)
class GridPoint:
    n1: int
    n2: int
    n3: int
    lr: float

    @property
    def config_id(self) -> str:
        return f"n1={self.n1}_n2={self.n2}_n3={self.n3}_lr={self.lr:g}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GridPoint":
        return cls(d["n1"], d["n2"], d["n3"], float(d["lr"]))


def enumerate_grid(grid: dict) -> list[GridPoint]:
    """Cartesian product in (n1, n2, n3, lr) order; this order breaks ranking ties."""
    return [GridPoint(*combo) for combo in itertools.product(grid["n1"], grid["n2"], grid["n3"], grid["lr"])]


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------

@dataclass
class DatasetEntry:
    expression: str
    response: str
    format: str | dict | None = None

    def resolve(self, base: Path) -> "DatasetEntry":
        fmt = self.format
        if isinstance(fmt, str):
            fmt = str(base / fmt)
        return DatasetEntry(str(base / self.expression), str(base / self.response), fmt)


@dataclass
class ExperimentPlan:
    """Everything a run needs; JSON-serializable, relative paths resolved against the plan file."""

    datasets: dict[str, DatasetEntry] = field(default_factory=dict)
    name: str = "experiment"
    drugs: list[str] | None = None
    grid: dict = field(default_factory=lambda: {k: list(v) for k, v in SEARCH_GRID.items()})
    configs: list[dict] | None = None
    grid_method: str = "proposed-multi"
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    a: float = DEFAULT_A
    r: float = DEFAULT_R
    a_values: list = field(default_factory=lambda: list(A_VALUES))
    r_values: list = field(default_factory=lambda: list(R_VALUES))
    repeats: int = 10
    folds: int = 5
    epochs: int = 100
    batch_size: int = 128
    patience: int = 3
    eval_repeats: int = 1
    variance_threshold: float = VARIANCE_THRESHOLD
    hidden1: int = 512
    hidden2: int = 128
    seed: int = 0
    workers: int = 1
    out: str = "results"
    best_configs: dict = field(default_factory=dict)
    default_config: dict = field(default_factory=lambda: {"n1": 4, "n2": 2, "n3": 1, "lr": 1e-4})
    max_failure_fraction: float = 0.1

    def __post_init__(self):
        self.datasets = {
            k: v if isinstance(v, DatasetEntry) else DatasetEntry(**v) for k, v in self.datasets.items()
        }
        self.a = parse_angle(self.a)
        self.r = parse_angle(self.r)
        unknown = [m for m in self.methods + [self.grid_method] if m not in METHODS]
        if unknown:
            raise ConfigurationError(f"unknown methods {unknown}; choose from {sorted(METHODS)}")
        if self.repeats < 1 or self.folds < 2 or self.epochs < 1:
            raise ConfigurationError("repeats >= 1, folds >= 2 and epochs >= 1 are required")

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentPlan":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown plan keys {sorted(extra)}")
        plan = cls(**d)
        if base_dir is not None:
            base = Path(base_dir)
            plan.datasets = {k: v.resolve(base) for k, v in plan.datasets.items()}
        return plan

    @classmethod
    def from_file(cls, path) -> "ExperimentPlan":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["datasets"] = {k: asdict(v) for k, v in self.datasets.items()}
        return d

    def plan_hash(self) -> str:
        d = self.to_dict()
        for volatile in ("out", "workers"):
            d.pop(volatile)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def selected_drugs(self) -> list[str]:
        drugs = self.drugs or sorted(self.datasets)
        missing = [d for d in drugs if d not in self.datasets]
        if missing:
            raise ConfigurationError(f"no dataset declared for {missing}")
        return drugs

    def points(self) -> list[GridPoint]:
        if self.configs is not None:
            return [GridPoint.from_dict(c) for c in self.configs]
        return enumerate_grid(self.grid)

    def best_config(self, method: str) -> GridPoint:
        return GridPoint.from_dict(self.best_configs.get(method, self.default_config))


@dataclass(frozen=True)
class RunSettings:
    """The slice of a plan a single training run depends on (picklable, hashable)."""

    epochs: int
    batch_size: int
    patience: int | None
    variance_threshold: float
    hidden1: int
    hidden2: int
    seed: int

    @classmethod
    def from_plan(cls, plan: ExperimentPlan, patience=True) -> "RunSettings":
        return cls(plan.epochs, plan.batch_size, plan.patience if patience else None,
                   plan.variance_threshold, plan.hidden1, plan.hidden2, plan.seed)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedDrug:
    name: str
    values: np.ndarray
    sample_ids: list[str]
    gene_ids: list[str]
    log_ic50: np.ndarray
    responder: np.ndarray
    train: np.ndarray
    test: np.ndarray
    strata: np.ndarray
    folds: np.ndarray
    fingerprint: str


def prepare_drug(plan: ExperimentPlan, drug: str) -> PreparedDrug:
    """Load one drug's data, hold out the random test split and assign CV folds."""
    entry = plan.datasets[drug]
    matrix, table = load_dataset(entry.expression, entry.response, entry.format)
    n = len(table.sample_ids)
    train_idx, test_idx = outer_split(n, derive_seed(plan.seed, drug))
    label_norm = fit_label_normalizer(table.log_ic50[train_idx])
    strata = stratify(label_norm.transform(table.log_ic50[train_idx]))
    folds = stratified_kfold(strata, plan.folds, plan.repeats, derive_seed(plan.seed, drug, "cv"))
    h = hashlib.sha256()
    for arr in (matrix.values, table.log_ic50, table.responder.astype(np.uint8)):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update("\x1f".join(matrix.gene_ids).encode())
    return PreparedDrug(drug, matrix.values, table.sample_ids, matrix.gene_ids, table.log_ic50,
                        table.responder, train_idx, test_idx, strata, folds, h.hexdigest())


def build_model(method, point: GridPoint, input_dim, settings: RunSettings, seed, a=DEFAULT_A, r=DEFAULT_R, meta=None):
    kind, norm_kind, head = METHODS[method]
    norm = NormalizationSpec(norm_kind, a, r) if norm_kind is Kind.GRADUAL_TANH else NormalizationSpec(norm_kind)
    config = ModelConfig(input_dim, CircuitConfig(point.n1, point.n2, point.n3, head), norm, kind,
                         settings.hidden1, settings.hidden2)
    return HybridModel(config, seed=seed, meta=meta)


def _fit_run(prepared: PreparedDrug, tr, val, method, point, settings, seed, a, r):
    genes = variance_filter(prepared.values, tr, settings.variance_threshold)
    label_norm = fit_label_normalizer(prepared.log_ic50[tr])
    x = prepared.values[:, genes]
    meta = {
        "drug": prepared.name, "method": method, "config": point.to_dict(), "a": a, "r": r,
        "gene_ids": [prepared.gene_ids[g] for g in genes], "label_normalizer": label_norm.to_dict(),
    }
    model = build_model(method, point, genes.size, settings, derive_seed(seed, "init"), a, r, meta)
    cfg = TrainConfig(batch_size=settings.batch_size, epochs=settings.epochs, learning_rate=point.lr,
                      early_stop_patience=settings.patience, seed=derive_seed(seed, "shuffle"))
    trace = train(model, (x[tr], label_norm.transform(prepared.log_ic50[tr])), (x[val], prepared.responder[val]), cfg)
    return trace, x


# ---------------------------------------------------------------------------
# task execution
# ---------------------------------------------------------------------------

_PREPARED: dict[str, PreparedDrug] = {}


def _install(prepared: dict):
    _PREPARED.clear()
    _PREPARED.update(prepared)


def _cv_task(task: dict) -> dict:
    prepared = _PREPARED[task["drug"]]
    point = GridPoint.from_dict(task["point"])
    settings = RunSettings(**task["settings"])
    folds = prepared.folds[task["repeat"]]
    tr = prepared.train[folds != task["fold"]]
    val = prepared.train[folds == task["fold"]]
    try:
        trace, _ = _fit_run(prepared, tr, val, task["method"], point, settings, task["seed"], task["a"], task["r"])
    except UndefinedMetricError as exc:
        return {"status": "skipped", "message": str(exc), "aucs": []}
    except Exception as exc:  # isolate per-run failures
        return {"status": "failed", "message": f"{type(exc).__name__}: {exc}", "aucs": []}
    return {"status": "ok", "message": "", "aucs": trace.val_auc}


def _holdout_task(task: dict) -> dict:
    prepared = _PREPARED[task["drug"]]
    point = GridPoint.from_dict(task["point"])
    settings = RunSettings(**task["settings"])
    if task.get("split"):
        tr, val, test = (np.asarray(task["split"][k], dtype=int) for k in ("train", "val", "test"))
    else:
        inner_seed = derive_seed(settings.seed, task["drug"], "inner", task["repeat"])
        tr, val = inner_split(prepared.train, prepared.strata, inner_seed)
        test = prepared.test
    try:
        trace, x = _fit_run(prepared, tr, val, task["method"], point, settings, task["seed"], task["a"], task["r"])
        test_auc = response_auc(trace.best_model.predict(x[test]), prepared.responder[test])
    except Exception as exc:
        return {"status": "failed", "message": f"{type(exc).__name__}: {exc}"}
    return {
        "status": "ok", "message": "", "test_auc": test_auc, "best_val_auc": trace.best_auc,
        "best_epoch": trace.best_epoch, "epochs_run": len(trace.val_auc), "trace_csv": trace.to_csv(),
        "checkpoint": trace.best_model.to_dict(),
    }


def _task_key(task: dict, fingerprint: str) -> str:
    payload = json.dumps({"task": task, "data": fingerprint, "version": __version__}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    tmp.replace(path)


class Runner:
    """Executes tasks in a fixed order with an on-disk cache and failure accounting."""

    def __init__(self, prepared: dict, workers: int = 1, cache_dir=None, max_failure_fraction: float = 1.0):
        self.prepared = prepared
        self.workers = max(1, int(workers))
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.max_failure_fraction = max_failure_fraction
        self.statuses: list[dict] = []

    def _cache_path(self, key):
        return self.cache_dir / key[:2] / f"{key}.json" if self.cache_dir else None

    def run(self, fn, tasks: list[dict], labels: list[str]) -> list[dict]:
        results: list[dict | None] = [None] * len(tasks)
        keys = [_task_key(t, self.prepared[t["drug"]].fingerprint) for t in tasks]
        pending = []
        for i, key in enumerate(keys):
            path = self._cache_path(key)
            if path is not None and path.exists():
                results[i] = json.loads(path.read_text())
            else:
                pending.append(i)
        failures = [i for i, r in enumerate(results) if r is not None and r["status"] == "failed"]
        limit = self.max_failure_fraction * len(tasks)

        def record(i, result, seconds):
            results[i] = result
            path = self._cache_path(keys[i])
            if path is not None:
                atomic_write(path, json.dumps(result))
            self.statuses.append({"run": labels[i], "status": result["status"], "seconds": round(seconds, 3)})
            if result["status"] == "failed":
                failures.append(i)
                log.warning("run %s failed: %s", labels[i], result["message"])

        def check_abort():
            if len(failures) > limit:
                summary = [{"run": labels[j], "message": results[j]["message"]} for j in failures]
                raise ExperimentAborted(f"{len(failures)} of {len(tasks)} runs failed", summary)

        check_abort()
        if self.workers == 1 or len(pending) <= 1:
            _install(self.prepared)
            for i in pending:
                start = time.perf_counter()
                record(i, fn(tasks[i]), time.perf_counter() - start)
                check_abort()
        else:
            with ProcessPoolExecutor(self.workers, initializer=_install, initargs=(self.prepared,)) as pool:
                futures = [(i, pool.submit(fn, tasks[i])) for i in pending]
                start = time.perf_counter()
                try:
                    for i, fut in futures:
                        record(i, fut.result(), time.perf_counter() - start)
                        check_abort()
                except ExperimentAborted:
                    for _, fut in futures:
                        fut.cancel()
                    raise
        return results


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> Path:
    atomic_write(path, csv_text(header, rows))
    return Path(path)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, plan: ExperimentPlan, command: str, statuses, artifacts, started: float) -> Path:
    """RunManifest: plan hash, version, per-run status, wall clock and artifact hashes."""
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "plan_hash": plan.plan_hash(),
        "software_version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
        "runs": statuses,
        "artifacts": {str(Path(p).relative_to(out_dir)): _sha256(p) for p in artifacts},
    }
    path = out_dir / f"manifest_{command}.json"
    atomic_write(path, json.dumps(manifest, indent=2))
    return path


def verify_manifest(path) -> list[str]:
    """Artifacts listed in a manifest that are missing or whose hash changed."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    bad = []
    for rel, digest in manifest["artifacts"].items():
        p = path.parent / rel
        if not p.exists() or _sha256(p) != digest:
            bad.append(rel)
    return bad


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _prepare_all(plan, drugs):
    return {d: prepare_drug(plan, d) for d in drugs}


def _run_seed(plan, drug, *parts):
    return derive_seed(plan.seed, drug, *parts)


def emit_curves(records, out_dir, drug, render=True) -> list[list]:
    """Per-config mean validation AUC by epoch with a marker on the first maximum."""
    by_config: dict[str, list[EvalRecord]] = {}
    for rec in records:
        by_config.setdefault(rec.config_id, []).append(rec)
    rows, curves = [], {}
    for config_id, recs in by_config.items():
        mean, best = aggregate_cv(recs)
        curves[config_id] = (mean, best)
        for epoch, value in enumerate(mean):
            rows.append([drug, config_id, epoch, float(value), int(epoch == best)])
    out_dir = Path(out_dir)
    write_csv(out_dir / "curves.csv", ["drug", "config_id", "epoch", "mean_auc", "is_best"], rows)
    if render and curves:
        plotting.plot_curves(curves, out_dir / "curves.png", title=drug)
    return rows


def records_from_csv(path) -> list[EvalRecord]:
    grouped: dict[tuple, EvalRecord] = {}
    for row in read_csv(path):
        key = (row["drug"], row["config_id"], int(row["repeat"]), int(row["fold"]))
        rec = grouped.setdefault(key, EvalRecord(*key))
        rec.aucs.append(float(row["auc"]))
    return list(grouped.values())


def run_grid_search(plan: ExperimentPlan, out_dir=None, workers=None, render=True) -> dict:
    """Repeated stratified k-fold CV for every grid point; writes ranked tables per drug.

    Returns ``{drug: ranking rows}``. Ranking: highest best mean AUC, then
    earlier epoch, then enumeration order.
    """
    started = time.time()
    out_dir = Path(out_dir or plan.out)
    drugs = plan.selected_drugs()
    prepared = _prepare_all(plan, drugs)
    runner = Runner(prepared, workers or plan.workers, out_dir / "cache",
                    max_failure_fraction=plan.max_failure_fraction)
    settings = asdict(RunSettings.from_plan(plan, patience=False))
    points = plan.points()
    rankings, artifacts = {}, []
    for drug in drugs:
        tasks, labels = [], []
        for ci, point in enumerate(points):
            for rep in range(plan.repeats):
                for fold in range(plan.folds):
                    tasks.append({
                        "kind": "cv", "drug": drug, "method": plan.grid_method, "point": point.to_dict(),
                        "repeat": rep, "fold": fold, "a": plan.a, "r": plan.r, "settings": settings,
                        "seed": _run_seed(plan, drug, ci, rep, fold),
                    })
                    labels.append(f"{drug}/{point.config_id}/r{rep}/f{fold}")
        results = runner.run(_cv_task, tasks, labels)

        drug_dir = out_dir / drug / "grid"
        record_rows, status_rows, records = [], [], []
        for task, res in zip(tasks, results):
            cid = GridPoint.from_dict(task["point"]).config_id
            status_rows.append([drug, cid, task["repeat"], task["fold"], res["status"], res["message"]])
            if res["status"] != "ok":
                continue
            rec = EvalRecord(drug, cid, task["repeat"], task["fold"], list(res["aucs"]))
            records.append(rec)
            record_rows.extend([drug, cid, rec.repeat, rec.fold, e, a] for e, a in enumerate(rec.aucs))
        artifacts.append(write_csv(drug_dir / "cv_records.csv",
                                   ["drug", "config_id", "repeat", "fold", "epoch", "auc"], record_rows))
        artifacts.append(write_csv(drug_dir / "cv_status.csv",
                                   ["drug", "config_id", "repeat", "fold", "status", "message"], status_rows))
        emit_curves(records, drug_dir, drug, render=render)
        artifacts.append(drug_dir / "curves.csv")
        if render and records:
            artifacts.append(drug_dir / "curves.png")

        ranking = []
        for ci, point in enumerate(points):
            recs = [r for r in records if r.config_id == point.config_id]
            if not recs:
                continue
            mean, best = aggregate_cv(recs)
            ranking.append((-float(mean[best]), best, ci, point, len(recs)))
        ranking.sort(key=lambda t: t[:3])
        rows = [[rank + 1, drug, p.config_id, p.n1, p.n2, p.n3, p.lr, -neg, best, n]
                for rank, (neg, best, _, p, n) in enumerate(ranking)]
        artifacts.append(write_csv(drug_dir / "ranking.csv",
                                   ["rank", "drug", "config_id", "n1", "n2", "n3", "lr", "best_mean_auc",
                                    "best_epoch", "n_runs"], rows))
        rankings[drug] = rows
    write_manifest(out_dir, plan, "grid-search", runner.statuses, artifacts, started)
    return rankings


def best_configs_from_ranking(path) -> dict:
    """Top-ranked grid point of a ``ranking.csv`` as a plan ``default_config`` entry."""
    top = read_csv(path)[0]
    return {"n1": int(top["n1"]), "n2": int(top["n2"]), "n3": int(top["n3"]), "lr": float(top["lr"])}


def _holdout_runs(plan, out_dir, workers, jobs, command, split=None):
    """Run held-out train/test jobs; ``jobs`` are (drug, method, point, a, r, tag) tuples."""
    drugs = sorted({j[0] for j in jobs})
    prepared = _prepare_all(plan, drugs)
    runner = Runner(prepared, workers or plan.workers, Path(out_dir) / "cache")
    settings = asdict(RunSettings.from_plan(plan))
    tasks, labels, meta = [], [], []
    for drug, method, point, a, r, tag in jobs:
        for rep in range(plan.eval_repeats):
            tasks.append({
                "kind": "holdout", "drug": drug, "method": method, "point": point.to_dict(), "repeat": rep,
                "a": a, "r": r, "settings": settings,
                "seed": _run_seed(plan, drug, "holdout", method, point.config_id, a, r, rep),
            })
            if split is not None:
                tasks[-1]["split"] = {k: getattr(split, k).tolist() for k in ("train", "val", "test")}
            labels.append(f"{drug}/{command}/{tag}/rep{rep}")
            meta.append((drug, method, point, a, r, tag, rep))
    return runner, runner.run(_holdout_task, tasks, labels), meta


def _save_holdout_products(res, directory, stem, artifacts):
    if res["status"] != "ok":
        return
    directory = Path(directory)
    atomic_write(directory / f"{stem}.ckpt.json", json.dumps(res["checkpoint"]))
    atomic_write(directory / f"{stem}.trace.csv", res["trace_csv"])
    artifacts.extend([directory / f"{stem}.ckpt.json", directory / f"{stem}.trace.csv"])


def chosen_config(plan: ExperimentPlan, method: str, drug: str, out_dir, use_ranking: bool) -> GridPoint:
    """Grid-search winner for ``drug`` when requested and available, else the plan's config."""
    ranking = Path(out_dir) / drug / "grid" / "ranking.csv"
    if use_ranking and method == plan.grid_method:
        if not ranking.exists():
            raise ConfigurationError(f"{ranking} not found; run grid-search first")
        return GridPoint.from_dict(best_configs_from_ranking(ranking))
    return plan.best_config(method)


def run_comparison(plan: ExperimentPlan, out_dir=None, workers=None, use_ranking=False) -> list[list]:
    """Train each method with early stopping on a stratified 4:1 split; score once on the test split."""
    started = time.time()
    out_dir = Path(out_dir or plan.out)
    drugs = plan.selected_drugs()
    jobs = [(d, m, chosen_config(plan, m, d, out_dir, use_ranking), plan.a, plan.r, m)
            for d in drugs for m in plan.methods]
    runner, results, meta = _holdout_runs(plan, out_dir, workers, jobs, "compare")
    rows, artifacts = [], []
    for res, (drug, method, point, a, r, tag, rep) in zip(results, meta):
        rows.append([drug, method, point.config_id, rep, res["status"], res.get("test_auc", ""),
                     res.get("best_val_auc", ""), res.get("best_epoch", ""), res.get("epochs_run", "")])
        _save_holdout_products(res, out_dir / drug / "compare", f"{method}.rep{rep}", artifacts)
    header = ["drug", "method", "config_id", "repeat", "status", "test_auc", "best_val_auc", "best_epoch", "epochs_run"]
    artifacts.append(write_csv(out_dir / "comparison.csv", header, rows))
    table = _pivot(rows, key_col=1, drugs=drugs, keys=plan.methods)
    artifacts.append(write_csv(out_dir / "comparison_table.csv", ["method"] + drugs, table))
    write_manifest(out_dir, plan, "compare", runner.statuses, artifacts, started)
    return rows


def _pivot(rows, key_col, drugs, keys):
    """Mean test AUC per (key, drug) over repeats; blank where every repeat failed."""
    table = []
    for key in keys:
        line = [key]
        for drug in drugs:
            vals = [row[5] for row in rows if row[0] == drug and row[key_col] == key and row[4] == "ok"]
            line.append(float(np.mean(vals)) if vals else "")
        table.append(line)
    return table


def run_ar_sweep(plan: ExperimentPlan, which: str, out_dir=None, workers=None, render=True,
                 use_ranking=False) -> list[list]:
    """Test AUC of the multi-measurement gradual-tanh model over a (r fixed) or r (a fixed)."""
    if which not in ("a", "r"):
        raise ConfigurationError("sweep parameter must be 'a' or 'r'")
    started = time.time()
    out_dir = Path(out_dir or plan.out)
    drugs = plan.selected_drugs()
    method = "proposed-multi"
    raw = plan.a_values if which == "a" else plan.r_values
    values = [parse_angle(v) for v in raw]
    jobs = []
    for drug in drugs:
        point = chosen_config(plan, method, drug, out_dir, use_ranking)
        for label, v in zip(raw, values):
            a, r = (v, DEFAULT_R) if which == "a" else (DEFAULT_A, v)
            jobs.append((drug, method, point, a, r, f"{which}={label}"))
    runner, results, meta = _holdout_runs(plan, out_dir, workers, jobs, f"sweep-{which}")
    rows, artifacts = [], []
    for res, (drug, _, p, a, r, tag, rep) in zip(results, meta):
        rows.append([drug, tag, a, r, rep, res["status"], res.get("test_auc", ""), res.get("best_val_auc", ""),
                     res.get("best_epoch", ""), res.get("epochs_run", "")])
    header = ["drug", "setting", "a", "r", "repeat", "status", "test_auc", "best_val_auc", "best_epoch", "epochs_run"]
    artifacts.append(write_csv(out_dir / f"sweep_{which}.csv", header, rows))
    tags = [f"{which}={label}" for label in raw]
    table = []
    for tag in tags:
        line = [tag]
        for drug in drugs:
            vals = [row[6] for row in rows if row[0] == drug and row[1] == tag and row[5] == "ok"]
            line.append(float(np.mean(vals)) if vals else "")
        table.append(line)
    artifacts.append(write_csv(out_dir / f"sweep_{which}_table.csv", ["setting"] + drugs, table))
    if render:
        by_drug = {drug: [line[1 + k] if line[1 + k] != "" else np.nan for line in table]
                   for k, drug in enumerate(drugs)}
        plotting.plot_sweep(values, by_drug, out_dir / f"sweep_{which}.png", xlabel=which)
        artifacts.append(out_dir / f"sweep_{which}.png")
    write_manifest(out_dir, plan, f"sweep-{which}", runner.statuses, artifacts, started)
    return rows


def train_one(plan: ExperimentPlan, drug: str, method: str, point: GridPoint | None = None, out_dir=None,
              split: SplitPlan | None = None) -> dict:
    """One held-out training run; writes checkpoint, trace CSV, split JSON and summary JSON.

    A ``split`` (row indices into the joined dataset) replaces the seeded
    train/validation/test split so an audited run can be replayed exactly.
    """
    started = time.time()
    out_dir = Path(out_dir or plan.out)
    point = point or plan.best_config(method)
    plan = replace(plan, eval_repeats=1)
    if split is None:
        prepared = prepare_drug(plan, drug)
        tr, val = inner_split(prepared.train, prepared.strata, derive_seed(plan.seed, drug, "inner", 0))
        split = SplitPlan(tr, val, prepared.test)
    runner, results, _ = _holdout_runs(plan, out_dir, 1, [(drug, method, point, plan.a, plan.r, method)],
                                       "train-one", split=split)
    res = results[0]
    artifacts = []
    directory = out_dir / drug / "train-one"
    _save_holdout_products(res, directory, method, artifacts)
    summary = {k: res.get(k) for k in ("status", "message", "test_auc", "best_val_auc", "best_epoch", "epochs_run")}
    summary.update(drug=drug, method=method, config=point.to_dict())
    split.save(directory / f"{method}.split.json")
    artifacts.append(directory / f"{method}.split.json")
    atomic_write(directory / f"{method}.summary.json", json.dumps(summary, indent=2, sort_keys=True))
    artifacts.append(directory / f"{method}.summary.json")
    write_manifest(out_dir, plan, "train-one", runner.statuses, artifacts, started)
    return summary


def emit_distribution(checkpoint, plan: ExperimentPlan, drug: str | None = None, n_samples: int = 100,
                      out_dir=None, bins: int = 40, render=True) -> dict:
    """Encoder outputs before and after normalization for training samples of a trained model.

    Writes ``distribution.csv`` (one row per sample and embedding dimension),
    ``distribution_hist.csv`` (histogram bins for both stages) and a summary
    JSON with the fraction of normalized values within 1% of the +-r boundary.
    """
    model = checkpoint if isinstance(checkpoint, HybridModel) else HybridModel.load(checkpoint)
    drug = drug or model.meta.get("drug")
    if drug is None:
        raise ConfigurationError("drug not given and not recorded in the checkpoint")
    out_dir = Path(out_dir or plan.out) / drug / "distribution"
    prepared = prepare_drug(plan, drug)
    gene_ids = model.meta.get("gene_ids", prepared.gene_ids)
    position = {g: i for i, g in enumerate(prepared.gene_ids)}
    missing = [g for g in gene_ids if g not in position]
    if missing:
        raise ConfigurationError(f"{len(missing)} checkpoint genes absent from the dataset, e.g. {missing[0]!r}")
    cols = np.array([position[g] for g in gene_ids])
    rng = np.random.default_rng(derive_seed(plan.seed, drug, "distribution"))
    picked = np.sort(rng.choice(prepared.train, size=min(n_samples, prepared.train.size), replace=False))
    phi, phi_norm = model.embed(prepared.values[np.ix_(picked, cols)])

    rows = [[prepared.sample_ids[s], d, float(phi[i, d]), float(phi_norm[i, d])]
            for i, s in enumerate(picked) for d in range(phi.shape[1])]
    write_csv(out_dir / "distribution.csv", ["sample", "dim", "phi", "phi_norm"], rows)
    hist_rows = []
    for stage, values in (("before", phi), ("after", phi_norm)):
        counts, edges = np.histogram(values, bins=bins)
        hist_rows.extend([stage, float(edges[k]), float(edges[k + 1]), int(counts[k])] for k in range(bins))
    write_csv(out_dir / "distribution_hist.csv", ["stage", "bin_left", "bin_right", "count"], hist_rows)

    spec = model.config.normalization
    summary = {"drug": drug, "n_samples": int(picked.size), "embedding_dim": int(phi.shape[1]),
               "normalization": spec.to_dict()}
    if spec.bounded and model.config.kind is ModelKind.HYBRID:
        summary["boundary_fraction"] = float(np.mean(np.abs(phi_norm) > 0.99 * spec.r))
        summary["max_abs_normalized"] = float(np.abs(phi_norm).max())
    atomic_write(out_dir / "distribution_summary.json", json.dumps(summary, indent=2, sort_keys=True))
    if render:
        plotting.plot_distribution(phi, phi_norm, out_dir / "distribution.png",
                                   title=f"{drug}: {spec.kind.value}")
    return summary
