"""MSE loss, Adam, and the epoch loop with validation-AUC early stopping."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError, TrainingError
from .metrics import response_auc
from .model import HybridModel, Mode

log = logging.getLogger(__name__)


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. ``pred``."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.shape != t.shape or p.size == 0:
        raise ShapeError(f"pred has {p.size} entries, target {t.size}")
    diff = p - t
    return float(np.mean(diff**2)), 2.0 * diff / p.size


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict, **kwargs) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, **kwargs)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new params and state, inputs untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainingError(f"non-finite gradient in {name}: {bad} of {np.size(g)} entries at step {state.t + 1}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_new, v_new = {}, {}, {}
    for name, value in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(value):
            raise ShapeError(f"gradient for {name} has shape {np.shape(g)}, expected {np.shape(value)}")
        m = b1 * state.m[name]
        m += (1 - b1) * g
        v = b2 * state.v[name]
        v += (1 - b2) * (g * g)
        denom = np.sqrt(v / (1 - b2**t))
        denom += state.eps
        step = m / denom
        step *= lr / (1 - b1**t)
        new_params[name] = value - step
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t, b1, b2, state.eps)


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 100
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    early_stop_patience: int | None = 3
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigurationError("early_stop_patience must be >= 1 or None")
        if self.batch_size < 2 or self.epochs < 1:
            raise ConfigurationError("batch_size must be >= 2 and epochs >= 1")


class EarlyStopping:
    """Tracks the best validation AUC; only a strictly larger value counts as improvement."""

    def __init__(self, patience: int | None):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value`` for ``epoch``; return True when training should stop."""
        if value > self.best:
            self.best, self.best_epoch, self.stale = value, epoch, 0
            return False
        self.stale += 1
        return self.patience is not None and self.stale >= self.patience


@dataclass
class TrainTrace:
    train_loss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    best_model: HybridModel | None = field(default=None, repr=False)

    @property
    def best_auc(self) -> float:
        return self.val_auc[self.best_epoch]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_auc"])
        for i, (loss, a) in enumerate(zip(self.train_loss, self.val_auc)):
            writer.writerow([i, repr(loss), repr(a)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "epochs_run": len(self.val_auc),
            "best_epoch": self.best_epoch,
            "best_val_auc": self.best_auc,
            "stopped_early": self.stopped_early,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def train_step(model: HybridModel, adam: AdamState, x, y, lr: float) -> tuple[float, AdamState]:
    pred, cache = model.forward(x, Mode.TRAIN)
    loss, dpred = mse_loss(pred, y)
    grads = model.backward(cache, dpred)
    model.params, adam = adam_step(adam, model.params, grads, lr)
    model.buffers.update(cache["buffers"])
    return loss, adam


def train(model: HybridModel, train_set, val_set, config: TrainConfig) -> TrainTrace:
    """Fit ``model`` in place and return the trace with the best-epoch snapshot.

    ``train_set`` is ``(X, y_normalized)``; ``val_set`` is ``(X, responder)``
    with binary labels scored by validation AUC after every epoch. With
    ``early_stop_patience=None`` every epoch runs and is scored.
    """
    x_tr, y_tr = (np.asarray(a, dtype=np.float64) for a in train_set)
    x_val, r_val = np.asarray(val_set[0], dtype=np.float64), np.asarray(val_set[1])
    if len(x_tr) == 0 or len(x_val) == 0:
        raise ConfigurationError("training and validation splits must be non-empty")
    if len(x_tr) != len(y_tr) or len(x_val) != len(r_val):
        raise ShapeError("features and labels differ in length")
    # fail fast if validation AUC is undefined for this split
    response_auc(np.zeros(len(r_val)), r_val)

    rng = np.random.default_rng(config.seed)
    adam = AdamState.zeros_like(model.params, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    stopper = EarlyStopping(config.early_stop_patience)
    trace = TrainTrace()
    n = len(x_tr)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if idx.size < 2:
                continue
            loss, adam = train_step(model, adam, x_tr[idx], y_tr[idx], config.learning_rate)
            total += loss * idx.size
            seen += idx.size
        trace.train_loss.append(total / seen if seen else float("nan"))
        val = response_auc(model.predict(x_val), r_val)
        trace.val_auc.append(val)
        stop = stopper.update(epoch, val)
        if stopper.best_epoch == epoch:
            trace.best_model = model.copy()
        if stop:
            trace.stopped_early = True
            break
    trace.best_epoch = stopper.best_epoch
    log.debug("trained %d epochs, best epoch %d (AUC %.4f)", len(trace.val_auc), trace.best_epoch, trace.best_auc)
    return trace
