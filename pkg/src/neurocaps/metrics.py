"""Confusion-matrix metrics: accuracy, multiclass MCC, per-class P/R/F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0


def confusion(preds, labels, k: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise ContractError("predictions and labels differ in length")
    for name, arr in (("label", labels), ("prediction", preds)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ContractError(f"{name} outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def mcc(cm: ConfusionMatrix | np.ndarray) -> float:
    """Gorodkin's R_K statistic; 0 when either marginal is degenerate."""
    c = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)
    if c.size == 0:
        raise ContractError("empty confusion matrix")
    s = c.sum()
    correct = np.trace(c)
    p = c.sum(axis=0)
    t = c.sum(axis=1)
    denom = (s * s - np.dot(p, p)) * (s * s - np.dot(t, t))
    if denom <= 0:
        return 0.0
    return float((correct * s - np.dot(p, t)) / np.sqrt(denom))


def per_class_prf(cm: ConfusionMatrix | np.ndarray) -> list[tuple[float, float, float]]:
    """(precision, recall, F1) per class; 0/0 counts as 0."""
    c = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)
    if c.size == 0:
        raise ContractError("empty confusion matrix")
    out = []
    for k in range(c.shape[0]):
        tp, col, row = c[k, k], c[:, k].sum(), c[k, :].sum()
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        out.append((float(p), float(r), float(f1)))
    return out


def macro_f1(cm) -> float:
    return float(np.mean([f for _, _, f in per_class_prf(cm)]))


def summary(cm: ConfusionMatrix) -> dict:
    return {"accuracy": cm.accuracy, "mcc": mcc(cm), "f1": macro_f1(cm)}
