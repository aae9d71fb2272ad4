"""Figure rendering for run artifacts. Always writes files, never shows."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import ROCCurve  # noqa: E402


def plot_history(history: Sequence[dict], path: str | os.PathLike) -> None:
    """Train/validation loss curves, plus the lr schedule on a second axis."""
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [row["train_loss"] for row in history], label="train loss")
    ax.plot(epochs, [row["val_loss"] for row in history], label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [row["lr"] for row in history], color="gray", ls="--", label="lr")
    ax2.set_ylabel("learning rate")
    ax2.set_yscale("log")
    ax.legend(loc="upper right")
    ax.set_title("training history")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_roc(curve: ROCCurve, auc_value: float, path: str | os.PathLike) -> None:
    fpr = [p[0] for p in curve.points]
    tpr = [p[1] for p in curve.points]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(fpr, tpr, marker=".", label=f"AUC = {auc_value:.4f}")
    ax.plot([0, 1], [0, 1], color="gray", ls=":", lw=1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower right")
    ax.set_title("ROC")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_timing(named_reports: Sequence[tuple[str, dict]], path: str | os.PathLike) -> None:
    """Stacked preprocess/forward bars, one per benchmarked model."""
    names = [name for name, _ in named_reports]
    pre = [rep["preprocess_seconds"] for _, rep in named_reports]
    fwd = [rep["forward_seconds"] for _, rep in named_reports]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(names, pre, label="preprocess")
    ax.bar(names, fwd, bottom=pre, label="forward")
    ax.set_ylabel("seconds")
    ax.set_title(f"evaluation time for {named_reports[0][1]['n_files']} files")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
