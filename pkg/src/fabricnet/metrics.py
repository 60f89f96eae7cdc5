"""Multi-label evaluation: exact match, micro P/R/F1, threshold-sweep AUC.

Precision, recall, F1 and AUC are micro-averaged: true/false positive
counts are pooled over every (sample, class) cell before any ratio is
taken. Undefined ratios follow the 0/0 -> 0.0 convention; an AUC over
single-class labels is reported as NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError

REPORT_FIELDS = ("accuracy", "precision", "recall", "f1", "auc", "loss")
REPORT_INT_FIELDS = ("params", "flops")


def _check_pair(predicted, target, binary=True):
    predicted = np.asarray(predicted)
    target = np.asarray(target)
    if predicted.shape != target.shape:
        raise ShapeError(f"shape mismatch: predicted {predicted.shape} vs target {target.shape}")
    if predicted.size == 0:
        raise ValidationError("empty inputs")
    if binary:
        for name, arr in (("predicted", predicted), ("target", target)):
            if not np.isin(arr, (0, 1)).all():
                raise ValidationError(f"{name} must be binary 0/1")
    return predicted, target


def exact_match_accuracy(predicted, target):
    """Fraction of samples whose full label row matches exactly."""
    predicted, target = _check_pair(predicted, target)
    if predicted.ndim == 1:
        return float(np.mean(predicted == target))
    rows = np.all(predicted == target, axis=tuple(range(1, predicted.ndim)))
    return float(rows.mean())


@dataclass(frozen=True)
class ConfusionCounts:
    """Micro-pooled cell counts over all (sample, class) pairs."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(predicted, target):
    """Pool binary decisions into a single ConfusionCounts."""
    predicted, target = _check_pair(predicted, target)
    p = predicted.astype(bool)
    t = target.astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(p & t)),
        fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)),
        tn=int(np.sum(~p & ~t)),
    )


def precision_recall_f1(counts):
    """(precision, recall, f1) from pooled counts; 0/0 ratios become 0.0."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def micro_precision_recall_f1(predicted, target):
    """Convenience wrapper: decisions in, micro P/R/F1 dict out."""
    precision, recall, f1 = precision_recall_f1(confusion_counts(predicted, target))
    return {"precision": precision, "recall": recall, "f1": f1}


def roc_points(scores, targets, n_thresholds=200):
    """Pooled ROC samples from an even threshold sweep over [0, 1].

    Predictions are ``score >= threshold``. The corners (0, 0) and
    (1, 1) are appended and points are sorted by false positive rate.
    Returns (fpr, tpr), or None when the pooled targets are single-class.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    targets = np.asarray(targets).ravel()
    if scores.shape != targets.shape or scores.size == 0:
        raise ValidationError("roc_points expects matching non-empty scores and targets")
    if n_thresholds < 2:
        raise ValidationError(f"n_thresholds must be >= 2, got {n_thresholds}")
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise ValidationError("scores must lie in [0, 1] so the threshold sweep covers them")
    pos = targets == 1
    n_pos = int(pos.sum())
    n_neg = int(targets.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return None
    thresholds = np.linspace(0.0, 1.0, n_thresholds)
    pred = scores[None, :] >= thresholds[:, None]
    tpr = (pred & pos).sum(axis=1) / n_pos
    fpr = (pred & ~pos).sum(axis=1) / n_neg
    fpr = np.concatenate([fpr, [0.0, 1.0]])
    tpr = np.concatenate([tpr, [0.0, 1.0]])
    order = np.lexsort((tpr, fpr))
    return fpr[order], tpr[order]


def auc_200(scores, targets, n_thresholds=200):
    """Micro-averaged area under the threshold-sweep ROC curve.

    All (sample, class) cells are pooled into one curve integrated by
    the trapezoid rule. Returns NaN when the pooled labels are all
    positive or all negative, where a ROC curve is undefined.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.shape != targets.shape:
        raise ShapeError(f"shape mismatch: scores {scores.shape} vs targets {targets.shape}")
    pts = roc_points(scores, targets, n_thresholds)
    if pts is None:
        return float("nan")
    fpr, tpr = pts
    return float(np.trapezoid(tpr, fpr))


def aggregate_runs(values):
    """Summarize repeated runs as ``mean±std`` with population std, 3 decimals."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError("aggregate_runs expects a non-empty 1-D sequence")
    return f"{arr.mean():.3f}±{arr.std(ddof=0):.3f}"


def aggregate_reports(reports, fields=REPORT_FIELDS):
    """Per-metric mean±std strings across a list of report dicts."""
    if not reports:
        raise ValidationError("aggregate_reports expects at least one report")
    return {name: aggregate_runs([r[name] for r in reports]) for name in fields}


def report_text(report):
    """Fixed-order ``key: value`` lines for one metrics report."""
    lines = [f"{name}: {report[name]:.6f}" for name in REPORT_FIELDS]
    lines += [f"{name}: {int(report.get(name, 0))}" for name in REPORT_INT_FIELDS]
    return "\n".join(lines)


def report_csv(report, header=False):
    """One fixed-order CSV row; optionally preceded by the header row."""
    cells = [f"{report[name]:.6f}" for name in REPORT_FIELDS]
    cells += [str(int(report.get(name, 0))) for name in REPORT_INT_FIELDS]
    row = ",".join(cells)
    if header:
        return ",".join(REPORT_FIELDS + REPORT_INT_FIELDS) + "\n" + row
    return row
