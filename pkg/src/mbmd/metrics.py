"""Window-level classification metrics: ACC, BCA and support-weighted F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows true, columns predicted
    acc: float
    bca: float
    weighted_f1: float

    def as_dict(self) -> dict[str, float]:
        return {"acc": self.acc, "bca": self.bca, "weighted_f1": self.weighted_f1}


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def metrics_from_confusion(cm) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    has_support = support > 0
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=has_support)
    f1_denom = support + predicted
    f1 = np.divide(2 * tp, f1_denom, out=np.zeros_like(tp), where=f1_denom > 0)
    return MetricsReport(
        confusion=cm,
        acc=float(tp.sum() / total),
        bca=float(recall[has_support].mean()),
        weighted_f1=float((support * f1).sum() / total),
    )


def compute_metrics(y_true, y_pred, num_classes: int) -> MetricsReport:
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, num_classes))


def majority_vote(trial_ids, y_true, y_pred, num_classes: int) -> MetricsReport:
    """Trial-level metrics: each trial's windows vote, ties go to the lower class."""
    trial_ids = np.asarray(trial_ids)
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    truths, votes = [], []
    for tid in np.unique(trial_ids):
        sel = trial_ids == tid
        truths.append(y_true[sel][0])
        votes.append(int(np.bincount(y_pred[sel], minlength=num_classes).argmax()))
    return compute_metrics(truths, votes, num_classes)
