"""Slide-level classification metrics.

Binary tasks report positive-class F1 and recall; multi-class tasks report
macro averages. Multi-class AUC is the one-vs-rest macro mean.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import UndefinedMetricError

__all__ = [
    "MetricSet",
    "roc_auc",
    "confusion_matrix",
    "confusion_metrics",
    "cohen_kappa",
    "macro_auc",
    "compute_metrics",
]


@dataclass(frozen=True)
class MetricSet:
    auc: float
    f1: float
    acc: float
    recall: float
    kappa: float

    def as_dict(self):
        return asdict(self)


def _midranks(x):
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    # tied runs share the mean of their 1-based positions
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(x)]])
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    return ranks


def roc_auc(scores, labels):
    """Probability that a random positive outranks a random negative; ties count half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both classes present")
    ranks = _midranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_matrix(preds, labels, num_classes):
    """Counts with true class along rows, predicted class along columns."""
    preds = np.asarray(preds, dtype=int).ravel()
    labels = np.asarray(labels, dtype=int).ravel()
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def confusion_metrics(preds, labels, num_classes):
    """Return ``(acc, recall, f1)``.

    With two classes recall and F1 are for class 1; otherwise they are macro
    means where a class with a zero denominator contributes 0.
    """
    cm = confusion_matrix(preds, labels, num_classes).astype(np.float64)
    total = cm.sum()
    acc = float(np.trace(cm) / total) if total else 0.0
    tp = np.diag(cm)
    actual = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(actual > 0, tp / actual, 0.0)
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    if num_classes == 2:
        return acc, float(recall[1]), float(f1[1])
    return acc, float(recall.mean()), float(f1.mean())


def cohen_kappa(preds, labels, num_classes, weighting="none"):
    observed = confusion_matrix(preds, labels, num_classes).astype(np.float64)
    n = observed.sum()
    if n == 0:
        raise ValueError("cohen_kappa needs at least one sample")
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / n
    i, j = np.indices((num_classes, num_classes))
    if weighting == "none":
        w = (i != j).astype(np.float64)
    elif weighting == "quadratic":
        w = ((i - j) / (num_classes - 1)) ** 2
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    num = np.sum(w * observed)
    den = np.sum(w * expected)
    if den == 0:
        if num == 0:
            return 1.0
        raise UndefinedMetricError("kappa undefined: expected disagreement is zero")
    return float(1.0 - num / den)


def macro_auc(score_matrix, labels, num_classes):
    scores = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(labels, dtype=int).ravel()
    absent = [c for c in range(num_classes) if not np.any(labels == c)]
    if absent:
        raise UndefinedMetricError(f"macro AUC undefined: classes {absent} absent from labels")
    return float(np.mean([roc_auc(scores[:, c], (labels == c).astype(int)) for c in range(num_classes)]))


def compute_metrics(probs, labels, num_classes, kappa_weighting=None):
    """MetricSet from per-sample class probabilities.

    An AUC that is undefined on this sample (a class is missing) is NaN.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=int).ravel()
    preds = probs.argmax(axis=1)
    if kappa_weighting is None:
        kappa_weighting = "none" if num_classes == 2 else "quadratic"
    try:
        if num_classes == 2:
            auc = roc_auc(probs[:, 1], labels)
        else:
            auc = macro_auc(probs, labels, num_classes)
    except UndefinedMetricError:
        auc = float("nan")
    acc, recall, f1 = confusion_metrics(preds, labels, num_classes)
    try:
        kappa = cohen_kappa(preds, labels, num_classes, kappa_weighting)
    except UndefinedMetricError:
        kappa = float("nan")
    return MetricSet(auc=auc, f1=f1, acc=acc, recall=recall, kappa=kappa)
