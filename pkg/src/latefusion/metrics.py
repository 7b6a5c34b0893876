"""Confusion matrix, accuracy and macro-F1."""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np


def _as_indices(preds, labels, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {labels.size} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} index out of range [0, {n_classes})")
    return preds, labels


def confusion(preds, labels, n_classes: int) -> np.ndarray:
    """``C x C`` counts; entry ``(i, j)`` is #samples of true class i predicted j."""
    preds, labels = _as_indices(preds, labels, n_classes)
    flat = np.bincount(labels * n_classes + preds, minlength=n_classes * n_classes)
    return flat.reshape(n_classes, n_classes)


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    """F1 for every class of a confusion matrix; every 0/0 counts as 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    pred_pos = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_pos > 0, tp / pred_pos, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return f1


def macro_f1_from_confusion(cm: np.ndarray) -> float:
    return float(per_class_f1(cm).mean())


def macro_f1(preds, labels, n_classes: int) -> float:
    """Unweighted mean F1 over all ``n_classes`` classes.

    Classes that are neither present nor predicted contribute 0, so a perfect
    score requires every configured class to appear.
    """
    return macro_f1_from_confusion(confusion(preds, labels, n_classes))


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds).ravel()
    labels = np.asarray(labels).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {labels.size} labels")
    if preds.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return float(np.mean(preds == labels))


def evaluation_report(preds: Sequence[int], labels: Sequence[int], n_classes: int) -> dict:
    """Metric name -> value (6 decimals) plus the confusion matrix."""
    cm = confusion(preds, labels, n_classes)
    return {
        "n_samples": int(cm.sum()),
        "n_classes": n_classes,
        "accuracy": round(accuracy(preds, labels), 6),
        "macro_f1": round(macro_f1_from_confusion(cm), 6),
        "per_class_f1": [round(float(x), 6) for x in per_class_f1(cm)],
        "confusion": cm.tolist(),
    }


def format_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
