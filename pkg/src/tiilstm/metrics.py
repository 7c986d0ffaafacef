"""Confusion counts, threshold metrics and ROC-AUC."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DataError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    cm: ConfusionMatrix
    tau: float | None = None
    roc_auc: float | None = None
    undefined: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "roc_auc": self.roc_auc,
            "tau": self.tau,
            "cm": asdict(self.cm),
            "undefined": list(self.undefined),
        }
        d.update(self.extra)
        return d


def confusion(preds, labels) -> ConfusionMatrix:
    p = np.asarray(preds).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape or p.size == 0:
        raise DataError(f"predictions ({p.size}) and labels ({y.size}) must be equal, non-empty")
    return ConfusionMatrix(
        tp=int(np.sum(p & y)),
        tn=int(np.sum(~p & ~y)),
        fp=int(np.sum(p & ~y)),
        fn=int(np.sum(~p & y)),
    )


def metrics(cm: ConfusionMatrix, tau: float | None = None) -> EvalReport:
    """Accuracy, precision, recall and F1.

    A ratio with a zero denominator is reported as 0 and named in
    ``undefined``.
    """
    if cm.total <= 0:
        raise DataError("confusion matrix is empty")
    undefined = []

    def ratio(num: int, den: int, name: str) -> float:
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    accuracy = (cm.tp + cm.tn) / cm.total
    precision = ratio(cm.tp, cm.tp + cm.fp, "precision")
    recall = ratio(cm.tp, cm.tp + cm.fn, "recall")
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        undefined.append("f1")
    return EvalReport(accuracy, precision, recall, f1, cm, tau, None, tuple(undefined))


def _check_binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or not np.isin(y, (0, 1)).all():
        raise DataError("labels must be a 1-D 0/1 sequence")
    if y.min() == y.max():
        raise DataError("ROC-AUC needs both classes present")
    return y.astype(bool)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney statistic over midranks (ties count one half)."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise DataError("scores and labels differ in length")
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) with one point per distinct score.

    A point at threshold ``t`` counts ``score >= t`` as positive; the curve
    starts at (0, 0) with threshold +inf.
    """
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), y.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0.0, tps / y.sum()]
    fpr = np.r_[0.0, fps / (~y).sum()]
    return fpr, tpr, np.r_[np.inf, s[last]]
