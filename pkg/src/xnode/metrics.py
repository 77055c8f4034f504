"""Accuracy, macro-F1, macro recall and macro one-vs-rest ROC-AUC.

Macro averages run over the classes that occur in the ground truth.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass
class MetricSet:
    accuracy: float
    f1: float
    sensitivity: float
    auc: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)

    def as_row(self) -> dict[str, float]:
        return {"acc": self.accuracy, "f1": self.f1, "sens": self.sensitivity, "auc": self.auc}


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def compute_metrics(y_pred, probs, y_true, n_classes: int) -> MetricSet:
    y_pred = np.asarray(y_pred, dtype=np.int64)
    y_true = np.asarray(y_true, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if not (len(y_pred) == len(y_true) == len(probs)):
        raise ValueError(f"length mismatch: {len(y_pred)} predictions, {len(probs)} probability "
                         f"rows, {len(y_true)} labels")
    if len(y_true) == 0:
        raise ValueError("no samples to score")
    if probs.shape[1] != n_classes:
        raise ValueError(f"probabilities have {probs.shape[1]} columns for {n_classes} classes")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("probability rows must sum to 1")
    cm = confusion_matrix(y_true, y_pred, n_classes)
    present = [c for c in range(n_classes) if cm[c].sum() > 0]
    per_class, f1s, recalls, aucs = {}, [], [], []
    for c in present:
        tp = cm[c, c]
        fn = cm[c].sum() - tp
        fp = cm[:, c].sum() - tp
        recall = tp / (tp + fn)
        precision = tp / (tp + fp) if tp + fp else 0.0
        f1 = 2 * tp / (2 * tp + fp + fn)
        auc = binary_auc(probs[:, c], y_true == c)
        if np.isnan(auc):
            warnings.warn(f"ROC-AUC undefined for class {c}: no negative samples; excluded")
        else:
            aucs.append(auc)
        per_class[c] = {"precision": float(precision), "recall": float(recall),
                        "f1": float(f1), "auc": auc}
        f1s.append(f1)
        recalls.append(recall)
    return MetricSet(
        accuracy=float(np.trace(cm) / cm.sum()),
        f1=float(np.mean(f1s)),
        sensitivity=float(np.mean(recalls)),
        auc=float(np.mean(aucs)) if aucs else float("nan"),
        per_class=per_class,
    )
