"""Expression/response ingestion, train-only preprocessing and split machinery."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigurationError, DataError

log = logging.getLogger(__name__)

VARIANCE_THRESHOLD = 0.1

DEFAULT_FORMAT = {
    "drug": None,
    "sample_column": "sample",
    "log_ic50_column": "log_ic50",
    "response_column": "response",
    "positive_labels": ["R", "1", "responder", "True", "true"],
    "expression_orientation": "samples_as_rows",
    "delimiter": None,
}


@dataclass
class ExpressionMatrix:
    values: np.ndarray  # samples x genes
    sample_ids: list[str]
    gene_ids: list[str]

    def __post_init__(self):
        if self.values.shape != (len(self.sample_ids), len(self.gene_ids)):
            raise DataError(f"matrix shape {self.values.shape} disagrees with id lists")


@dataclass
class ResponseTable:
    sample_ids: list[str]
    log_ic50: np.ndarray
    responder: np.ndarray  # bool
    drug: str | None = None
    dropped: int = 0


def read_format(sidecar) -> dict:
    """Merge a JSON sidecar (path or dict) over the default column layout."""
    fmt = dict(DEFAULT_FORMAT)
    if sidecar is None:
        return fmt
    if not isinstance(sidecar, dict):
        sidecar = json.loads(Path(sidecar).read_text())
    unknown = set(sidecar) - set(fmt)
    if unknown:
        raise ConfigurationError(f"unknown sidecar keys {sorted(unknown)}")
    fmt.update(sidecar)
    return fmt


def _sep(path: Path, fmt: dict) -> str:
    if fmt["delimiter"]:
        return fmt["delimiter"]
    return "\t" if path.suffix.lower() in (".tsv", ".tab", ".txt") else ","


def _numeric(frame: pd.DataFrame, what: str) -> np.ndarray:
    # python float() parses correctly rounded, unlike the pandas fast path
    try:
        values = frame.to_numpy(dtype=np.float64)
        bad = ~np.isfinite(values)
    except (TypeError, ValueError):
        values = None
        bad = frame.apply(pd.to_numeric, errors="coerce").isna().to_numpy()
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DataError(f"{what}: non-numeric value {frame.iat[r, c]!r} at row {frame.index[r]!r}, column {frame.columns[c]!r}")
    return values


def load_dataset(expression_path, response_path, sidecar=None) -> tuple[ExpressionMatrix, ResponseTable]:
    """Join expression and response files on sample id.

    Row order follows the response file. Response rows whose sample is missing
    from the expression file are dropped with a warning and counted in
    ``ResponseTable.dropped``; duplicated sample ids are an error.
    """
    fmt = read_format(sidecar)
    expression_path, response_path = Path(expression_path), Path(response_path)
    expr = pd.read_csv(expression_path, sep=_sep(expression_path, fmt), index_col=0, dtype=str)
    if fmt["expression_orientation"] == "genes_as_rows":
        expr = expr.T
    elif fmt["expression_orientation"] != "samples_as_rows":
        raise ConfigurationError(f"unknown orientation {fmt['expression_orientation']!r}")
    expr.index = expr.index.astype(str).str.strip()
    if expr.index.duplicated().any():
        raise DataError(f"duplicated sample id in expression file: {expr.index[expr.index.duplicated()][0]!r}")

    resp = pd.read_csv(response_path, sep=_sep(response_path, fmt), dtype=str)
    missing = [fmt[k] for k in ("sample_column", "log_ic50_column", "response_column") if fmt[k] not in resp.columns]
    if missing:
        raise DataError(f"response file lacks columns {missing}")
    resp[fmt["sample_column"]] = resp[fmt["sample_column"]].astype(str).str.strip()
    dup = resp[fmt["sample_column"]].duplicated()
    if dup.any():
        raise DataError(f"duplicated sample id in response file: {resp[fmt['sample_column']][dup].iloc[0]!r}")

    known = resp[fmt["sample_column"]].isin(expr.index)
    dropped = int((~known).sum())
    if dropped:
        warnings.warn(f"{dropped} response rows have no expression profile and were dropped", stacklevel=2)
    resp = resp[known].reset_index(drop=True)
    ids = resp[fmt["sample_column"]].tolist()

    values = _numeric(expr.loc[ids], "expression")
    log_ic50 = _numeric(resp[[fmt["log_ic50_column"]]].set_axis(ids), "response")[:, 0]
    positive = {str(p) for p in fmt["positive_labels"]}
    responder = resp[fmt["response_column"]].astype(str).str.strip().isin(positive).to_numpy()

    matrix = ExpressionMatrix(values, ids, [str(g) for g in expr.columns])
    table = ResponseTable(ids, log_ic50, responder, fmt["drug"], dropped)
    return matrix, table


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def variance_filter(matrix, train_indices, threshold: float = VARIANCE_THRESHOLD) -> np.ndarray:
    """Indices of genes whose population variance over training rows exceeds ``threshold``."""
    values = matrix.values if isinstance(matrix, ExpressionMatrix) else np.asarray(matrix)
    idx = np.asarray(train_indices)
    if idx.size < 2:
        raise ConfigurationError("variance filter needs at least 2 training rows")
    keep = np.flatnonzero(values[idx].var(axis=0) > threshold)
    if keep.size == 0:
        raise ConfigurationError(f"no gene has training variance above {threshold}")
    return keep


def stratify(labels, n_bins: int = 4) -> np.ndarray:
    """Equal-width bins between min and max; half-open except the closed top bin."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    lo, hi = y.min(), y.max()
    if hi == lo:
        warnings.warn("labels are constant; using a single stratum", stacklevel=2)
        return np.zeros(y.size, dtype=int)
    edges = np.linspace(lo, hi, n_bins + 1)
    return np.clip(np.searchsorted(edges, y, side="right") - 1, 0, n_bins - 1)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _deal(strata, k: int, rng) -> np.ndarray:
    """Shuffle within each stratum and deal round-robin, continuing the turn across strata."""
    strata = np.asarray(strata)
    folds = np.empty(strata.size, dtype=int)
    turn = 0
    for s in np.unique(strata):
        members = rng.permutation(np.flatnonzero(strata == s))
        folds[members] = (turn + np.arange(members.size)) % k
        turn = (turn + members.size) % k
    return folds


def stratified_kfold(strata, k: int = 5, repeats: int = 10, seed: int = 0) -> np.ndarray:
    """Fold assignment per repeat: array of shape (repeats, n_samples) with values in [0, k)."""
    strata = np.asarray(strata)
    if k < 2 or k > strata.size:
        raise ConfigurationError(f"cannot make {k} non-empty folds from {strata.size} samples")
    return np.stack([
        _deal(strata, k, np.random.default_rng(derive_seed(seed, "kfold", rep))) for rep in range(repeats)
    ])


@dataclass
class SplitPlan:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    strata: np.ndarray | None = None
    folds: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}
        if self.strata is not None:
            d["strata"] = self.strata.tolist()
        if self.folds is not None:
            d["folds"] = self.folds.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        get = lambda k: np.asarray(d[k], dtype=int) if d.get(k) is not None else None  # noqa: E731
        plan = cls(get("train"), get("val"), get("test"), get("strata"), get("folds"))
        parts = np.concatenate([plan.train, plan.val, plan.test])
        if np.unique(parts).size != parts.size:
            raise ConfigurationError("split plan indices overlap")
        return plan

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SplitPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def outer_split(n_samples: int, seed: int, test_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Plain random train/test split."""
    if n_samples < 10:
        raise ConfigurationError("need at least 10 samples for a 9:1 split")
    perm = np.random.default_rng(derive_seed(seed, "outer")).permutation(n_samples)
    n_test = int(round(n_samples * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def inner_split(train_idx, strata, seed: int, k: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Stratified 4:1 train/validation split of ``train_idx`` (one fold held out)."""
    train_idx = np.asarray(train_idx)
    folds = _deal(strata, k, np.random.default_rng(derive_seed(seed, "inner")))
    return train_idx[folds != 0], train_idx[folds == 0]


def holdout_split(n_samples: int, seed: int, labels=None, n_bins: int = 4) -> SplitPlan:
    """Random 9:1 train/test, then a stratified 4:1 train/validation split.

    ``labels`` (normalized responses for all samples) drive the inner
    stratification; only training rows enter the bin edges. Without labels the
    inner split uses a single stratum.
    """
    train, test = outer_split(n_samples, seed)
    if labels is None:
        strata = np.zeros(train.size, dtype=int)
    else:
        strata = stratify(np.asarray(labels)[train], n_bins)
    tr, val = inner_split(train, strata, seed)
    return SplitPlan(tr, val, test, strata)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def make_teacher_dataset(n_samples=500, n_genes=50, seed=0, n_informative=5, noise=0.1,
                         responder_fraction=0.2, n_flat=5):
    """Synthetic expression matrix with a linear teacher on a few genes.

    ``log_ic50 = X[:, :n_informative] @ w + noise``; the lowest
    ``responder_fraction`` of log(IC50) are responders. The last ``n_flat``
    genes have tiny variance so the variance filter has something to drop.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_samples, n_genes))
    if n_flat:
        x[:, -n_flat:] *= 0.05
    w = rng.normal(size=n_informative)
    w /= np.linalg.norm(w)
    log_ic50 = x[:, :n_informative] @ w + noise * rng.normal(size=n_samples)
    responder = log_ic50 <= np.quantile(log_ic50, responder_fraction)
    ids = [f"S{i:04d}" for i in range(n_samples)]
    genes = [f"G{j:03d}" for j in range(n_genes)]
    return ExpressionMatrix(x, ids, genes), ResponseTable(ids, log_ic50, responder)


def write_dataset(matrix: ExpressionMatrix, table: ResponseTable, directory, drug="Synthetic") -> dict:
    """Write CSV files plus sidecar; return a dataset entry for an experiment plan."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    expr = pd.DataFrame(matrix.values, index=pd.Index(matrix.sample_ids, name="sample"), columns=matrix.gene_ids)
    expr.to_csv(directory / "expression.csv", float_format="%.17g")
    resp = pd.DataFrame({
        "sample": table.sample_ids,
        "log_ic50": table.log_ic50,
        "response": np.where(table.responder, "R", "NR"),
    })
    resp.to_csv(directory / "response.csv", index=False, float_format="%.17g")
    sidecar = {"drug": drug, "sample_column": "sample", "log_ic50_column": "log_ic50", "response_column": "response"}
    (directory / "format.json").write_text(json.dumps(sidecar, indent=2))
    return {"expression": "expression.csv", "response": "response.csv", "format": "format.json"}
