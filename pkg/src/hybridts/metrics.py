"""Confusion counts, precision/recall and step-interpolated PR-AUC."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class PRCurve:
    """Points ordered by descending threshold, starting at (recall 0, precision 1)."""

    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    auc: float

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["recall", "precision"])
            for r, p in zip(self.recall.tolist(), self.precision.tolist()):
                w.writerow([repr(r), repr(p)])


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.size} scores vs {y.size} labels")
    if s.size == 0:
        raise ValueError("need at least one sample")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return s, y.astype(bool)


def confusion_at_threshold(scores, labels, threshold: float) -> ConfusionCounts:
    """Counts when every score ``>= threshold`` is called positive."""
    s, y = _check(scores, labels)
    pred = s >= threshold
    return ConfusionCounts(
        tp=int(np.sum(pred & y)),
        fp=int(np.sum(pred & ~y)),
        tn=int(np.sum(~pred & ~y)),
        fn=int(np.sum(~pred & y)),
    )


def precision_recall(counts: ConfusionCounts) -> tuple[float, float]:
    """Precision (1.0 when nothing is called positive) and recall."""
    if counts.tp + counts.fn == 0:
        raise ValueError("recall is undefined without positive labels")
    called = counts.tp + counts.fp
    precision = counts.tp / called if called else 1.0
    return precision, counts.tp / (counts.tp + counts.fn)


def pr_auc(scores, labels) -> tuple[PRCurve, float]:
    """PR curve over all distinct thresholds and its average precision.

    The area is ``sum_k (R_k - R_{k-1}) * P_k`` (step interpolation); tied
    scores enter the curve as a single threshold.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("PR-AUC is undefined without positive labels")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of every block of tied scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    called = ends + 1
    precision = tp / called
    recall = tp / n_pos
    gains = np.diff(np.r_[0.0, recall])
    auc = float(np.sum(gains * precision))
    curve = PRCurve(
        recall=np.r_[0.0, recall],
        precision=np.r_[1.0, precision],
        thresholds=np.r_[np.inf, s[ends]],
        auc=auc,
    )
    return curve, auc


def average_precision(scores, labels) -> float:
    return pr_auc(scores, labels)[1]
