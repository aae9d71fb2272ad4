"""Binary classification metrics.

The positive class is "real" (label 1). A sample is predicted positive when
its score is >= the decision threshold. Ratio metrics use the convention that
a zero denominator yields 0.0, with a flag recorded so reports can footnote
the degeneracy instead of hiding it.

The ROC curve sweeps thresholds from +inf down through the unique observed
scores, collapsing ties into single points, and always contains (0, 0) and
(1, 1). AUC is the trapezoidal area under that curve, which equals the
probability a random positive outscores a random negative (ties counting
half).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class ROCCurve:
    """Operating points as (fpr, tpr), one threshold per point."""

    points: tuple[tuple[float, float], ...]
    thresholds: tuple[float, ...]


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts
    threshold: float
    n: int
    flags: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "counts": {
                "tp": self.counts.tp,
                "fp": self.counts.fp,
                "tn": self.counts.tn,
                "fn": self.counts.fn,
            },
            "threshold": self.threshold,
            "n": self.n,
            "flags": list(self.flags),
        }


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.ndim != 1:
        raise ValueError("scores and labels must be 1-D")
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.shape[0]} scores, {y.shape[0]} labels")
    if s.shape[0] == 0:
        raise ValueError("empty score list")
    if not np.isfinite(s).all():
        raise ValueError("scores contain non-finite values")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (fake) or 1 (real)")
    return s, y.astype(np.int64)


def confusion_counts(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Count tp/fp/tn/fn with score >= threshold meaning predicted real."""
    s, y = _validate(scores, labels)
    if not math.isfinite(threshold):
        raise ValueError(f"threshold must be finite, got {threshold}")
    pred = s >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total if c.total else 0.0


def precision(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp
    return c.tp / denom if denom else 0.0


def recall(c: ConfusionCounts) -> float:
    denom = c.tp + c.fn
    return c.tp / denom if denom else 0.0


def harmonic_f1(p: float, r: float) -> float:
    """F1 as the harmonic mean of precision and recall; 0 when both are 0."""
    return 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0


def f1(c: ConfusionCounts) -> float:
    return harmonic_f1(precision(c), recall(c))


def roc_curve(scores, labels) -> ROCCurve:
    """Tie-collapsed ROC curve from scores and binary labels.

    Raises if only one class is present, since the curve (and its area) is
    undefined then.
    """
    s, y = _validate(scores, labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined for single-class labels")

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tps = np.cumsum(y_sorted == 1)
    fps = np.cumsum(y_sorted == 0)
    # keep only the last index of each tie group
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]

    points = [(0.0, 0.0)]
    thresholds = [math.inf]
    for i in last:
        points.append((fps[i] / n_neg, tps[i] / n_pos))
        thresholds.append(float(s_sorted[i]))
    return ROCCurve(points=tuple(points), thresholds=tuple(thresholds))


def auc(scores, labels) -> float:
    """Area under the ROC curve (trapezoidal rule)."""
    curve = roc_curve(scores, labels)
    pts = np.asarray(curve.points)
    return float(np.trapezoid(pts[:, 1], pts[:, 0]))


def metrics_report(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """All headline metrics at one decision threshold, plus AUC.

    Zero-denominator metrics come back as 0.0 and are named in ``flags``.
    Single-class label sets raise (AUC is undefined there).
    """
    c = confusion_counts(scores, labels, threshold)
    flags = []
    if c.tp + c.fp == 0:
        flags.append("precision_zero_denominator")
    if c.tp + c.fn == 0:
        flags.append("recall_zero_denominator")
    p = precision(c)
    r = recall(c)
    if p + r == 0:
        flags.append("f1_zero_denominator")
    return MetricsReport(
        auc=auc(scores, labels),
        accuracy=accuracy(c),
        precision=p,
        recall=r,
        f1=harmonic_f1(p, r),
        counts=c,
        threshold=threshold,
        n=c.total,
        flags=tuple(flags),
    )
