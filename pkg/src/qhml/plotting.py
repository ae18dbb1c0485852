"""Figure rendering for the report commands. PNGs land next to the CSVs they draw."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

BEFORE_COLOR = "tab:blue"
AFTER_COLOR = "tab:orange"


def new_figure(width=6.0, height=None, ncols=1):
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    height = height or width * golden_ratio
    fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, height), facecolor="w", squeeze=False)
    return fig, axes[0]


def save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_distribution(phi, phi_norm, path, title=None, bins=40):
    """Overlaid histograms of values before (blue) and after (orange) normalization."""
    fig, (ax,) = new_figure()
    phi, phi_norm = np.ravel(phi), np.ravel(phi_norm)
    ax.hist(phi, bins=bins, color=BEFORE_COLOR, alpha=0.6, label="before normalization")
    ax.hist(phi_norm, bins=bins, color=AFTER_COLOR, alpha=0.6, label="after normalization")
    ax.set_xlabel("value")
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    save(fig, path)


def plot_curves(curves, path, title=None):
    """Mean validation AUC against epoch, one line per config, red dot on each maximum.

    ``curves`` maps a config label to ``(mean_auc_per_epoch, best_epoch)``.
    """
    fig, (ax,) = new_figure(7.0)
    for label, (mean, best) in curves.items():
        epochs = np.arange(len(mean))
        ax.plot(epochs, mean, lw=1.0, label=label)
        ax.plot([best], [mean[best]], "o", color="red", ms=4)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean validation AUC")
    if title:
        ax.set_title(title)
    if len(curves) <= 12:
        ax.legend(fontsize=7, frameon=False)
    save(fig, path)


def plot_sweep(values, aucs_by_drug, path, xlabel, title=None):
    """Test AUC against a swept normalization hyperparameter, one line per drug."""
    fig, (ax,) = new_figure()
    for drug, aucs in aucs_by_drug.items():
        ax.plot(values, aucs, "o-", label=drug)
    ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("test AUC")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    save(fig, path)
