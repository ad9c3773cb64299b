"""Classification metrics: accuracy, F1, MCC, rank AUC and confusion matrices."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    """A metric has no value on the given inputs (single-class labels, zero denominator)."""


def _check(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"inputs must be aligned 1-D arrays, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise ValueError("metrics need at least one sample")
    return a, b


def midranks(values) -> np.ndarray:
    """1-based ranks with ties sharing the mean of the ranks they span."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    n = v.size
    while i < n:
        j = i
        while j + 1 < n and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic; ties count one half."""
    s, y = _check(scores, labels)
    y = y.astype(np.int64)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("AUC needs 0/1 labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    r = midranks(s)
    # U statistic, kept in exact half-integers until the final division
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(predictions, labels) -> float:
    p, y = _check(predictions, labels)
    return float((p == y).mean())


def confusion_matrix(predictions, labels, n_classes: Optional[int] = None) -> np.ndarray:
    """Counts with rows indexed by the true label and columns by the prediction."""
    p, y = _check(predictions, labels)
    p = p.astype(np.int64)
    y = y.astype(np.int64)
    k = n_classes if n_classes is not None else int(max(p.max(), y.max())) + 1
    if p.min() < 0 or y.min() < 0 or p.max() >= k or y.max() >= k:
        raise ValueError("class index out of range")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def row_normalize(cm: np.ndarray) -> np.ndarray:
    """Each nonempty row divided by its sum; empty rows stay zero."""
    cm = np.asarray(cm, dtype=np.float64)
    sums = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, sums, out=np.zeros_like(cm), where=sums > 0)


def f1_binary(predictions, labels, positive: int = 1) -> float:
    p, y = _check(predictions, labels)
    tp = int(((p == positive) & (y == positive)).sum())
    fp = int(((p == positive) & (y != positive)).sum())
    fn = int(((p != positive) & (y == positive)).sum())
    if 2 * tp + fp + fn == 0:
        raise UndefinedMetricError("F1 is undefined with no positive predictions or labels")
    return 2 * tp / (2 * tp + fp + fn)


def f1_weighted(predictions, labels) -> float:
    """Per-class F1 averaged with weights equal to each class's support in ``labels``."""
    p, y = _check(predictions, labels)
    classes, support = np.unique(y, return_counts=True)
    total = 0.0
    for c, s in zip(classes, support):
        tp = int(((p == c) & (y == c)).sum())
        fp = int(((p == c) & (y != c)).sum())
        fn = int(((p != c) & (y == c)).sum())
        total += s * (2 * tp / (2 * tp + fp + fn))
    return float(total / y.size)


def mcc(predictions, labels) -> float:
    """Matthews correlation; the multiclass (Gorodkin) form reduces to the binary formula for two classes."""
    p, y = _check(predictions, labels)
    classes = np.union1d(p, y)
    index = {c: i for i, c in enumerate(classes.tolist())}
    cm = confusion_matrix([index[c] for c in p.tolist()], [index[c] for c in y.tolist()], len(classes))
    cm = cm.astype(np.float64)
    t = cm.sum(axis=1)
    pk = cm.sum(axis=0)
    c = np.trace(cm)
    s = cm.sum()
    num = c * s - float(t @ pk)
    den = math.sqrt(s * s - float(pk @ pk)) * math.sqrt(s * s - float(t @ t))
    if den == 0:
        raise UndefinedMetricError("MCC is undefined when predictions or labels hold a single class")
    return float(num / den)


def binary_metrics(scores, labels, threshold: float = 0.5) -> dict[str, float]:
    """ACC/AUC/F1/MCC for probability scores; predictions are ``score > threshold``."""
    s, y = _check(scores, labels)
    pred = (s > threshold).astype(np.int64)
    return {
        "acc": accuracy(pred, y),
        "auc": auc(s, y),
        "f1": f1_binary(pred, y),
        "mcc": mcc(pred, y),
    }


def multiclass_metrics(probs: np.ndarray, labels: Sequence[int]) -> dict[str, float]:
    """ACC, weighted F1 and generalized MCC from a (N, K) probability matrix."""
    probs = np.asarray(probs)
    y = np.asarray(labels, dtype=np.int64)
    pred = probs.argmax(axis=1)
    return {"acc": accuracy(pred, y), "f1": f1_weighted(pred, y), "mcc": mcc(pred, y)}
