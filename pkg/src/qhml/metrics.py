"""AUC on binary responder labels and cross-validation aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError, UndefinedMetricError


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(random positive outscores random negative), ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores but {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def response_auc(predictions, responder) -> float:
    """AUC for predicted normalized log(IC50).

    Responders have low IC50, so the score is the negated prediction with
    responder as the positive class.
    """
    return auc(-np.asarray(predictions, dtype=np.float64), responder)


@dataclass
class EvalRecord:
    drug: str
    config_id: str
    repeat: int
    fold: int
    aucs: list[float] = field(default_factory=list)

    @property
    def best_auc(self) -> float:
        return max(self.aucs)

    @property
    def best_epoch(self) -> int:
        return int(np.argmax(self.aucs))


def aggregate_cv(records) -> tuple[np.ndarray, int]:
    """Per-epoch mean AUC over runs and the first epoch attaining the maximum."""
    traces = [list(r.aucs) if isinstance(r, EvalRecord) else list(r) for r in records]
    if not traces:
        raise ValueError("no records to aggregate")
    lengths = {len(t) for t in traces}
    if len(lengths) != 1:
        raise ShapeError(f"cannot aggregate traces of differing lengths {sorted(lengths)}")
    mean = np.mean(np.asarray(traces, dtype=np.float64), axis=0)
    return mean, int(np.argmax(mean))
