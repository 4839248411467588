"""Evaluation metrics: confusion-matrix scores, flip accounting, IoU, ROC/AUC."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyCounts, EmptyMatrix, LengthMismatch, ShapeMismatch, SingleClass


# --------------------------------------------------------------------------
# confusion matrix


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # counts[actual, predicted]
    classes: tuple = ()

    @classmethod
    def from_labels(cls, actual: Sequence, predicted: Sequence, classes: Sequence) -> "ConfusionMatrix":
        if len(actual) != len(predicted):
            raise LengthMismatch(f"{len(actual)} actual vs {len(predicted)} predicted labels")
        index = {c: i for i, c in enumerate(classes)}
        counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
        a = np.fromiter((index[v] for v in actual), dtype=np.int64, count=len(actual))
        p = np.fromiter((index[v] for v in predicted), dtype=np.int64, count=len(predicted))
        np.add.at(counts, (a, p), 1)
        return cls(counts, tuple(classes))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float
    precision: float
    recall: float
    specificity: float
    undefined: tuple[str, ...] = ()  # "precision[c]" etc. where a denominator was zero


def _ratio(num: float, den: float, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def classification_metrics(cm: ConfusionMatrix | np.ndarray) -> ClassificationMetrics:
    """Accuracy plus one-vs-rest precision/recall/specificity, macro-averaged."""
    counts = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.int64)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise ShapeMismatch(f"confusion matrix must be square, got {counts.shape}")
    total = int(counts.sum())
    if total == 0:
        raise EmptyMatrix("confusion matrix has no samples")
    flags: list[str] = []
    prec, rec, spec = [], [], []
    for c in range(counts.shape[0]):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum()) - tp
        fn = int(counts[c, :].sum()) - tp
        tn = total - tp - fp - fn
        prec.append(_ratio(tp, tp + fp, f"precision[{c}]", flags))
        rec.append(_ratio(tp, tp + fn, f"recall[{c}]", flags))
        spec.append(_ratio(tn, tn + fp, f"specificity[{c}]", flags))
    return ClassificationMetrics(
        float(np.trace(counts)) / total,
        float(np.mean(prec)),
        float(np.mean(rec)),
        float(np.mean(spec)),
        tuple(flags),
    )


# --------------------------------------------------------------------------
# flips


@dataclass(frozen=True)
class FlipCounts:
    correct_flips: int = 0  # TP: wrong -> right
    incorrect_flips: int = 0  # FP: right -> wrong
    correct_no_flips: int = 0  # TN: right and unchanged
    incorrect_no_flips: int = 0  # FN: wrong and unchanged, or wrong -> other wrong

    @property
    def total(self) -> int:
        return self.correct_flips + self.incorrect_flips + self.correct_no_flips + self.incorrect_no_flips


def flip_accounting(base_preds: Sequence, weighted_preds: Sequence, gt: Sequence) -> FlipCounts:
    if not (len(base_preds) == len(weighted_preds) == len(gt)):
        raise LengthMismatch(f"lengths {len(base_preds)}, {len(weighted_preds)}, {len(gt)} differ")
    cf = inc_f = cnf = inf = 0
    for b, w, g in zip(base_preds, weighted_preds, gt):
        if b != w and w == g:
            cf += 1
        elif b == g and w != g:
            inc_f += 1
        elif b == g and w == g:
            cnf += 1
        else:
            inf += 1
    return FlipCounts(cf, inc_f, cnf, inf)


def flip_metrics(counts: FlipCounts) -> ClassificationMetrics:
    if counts.total == 0:
        raise EmptyCounts("no samples")
    tp, fp, tn, fn = counts.correct_flips, counts.incorrect_flips, counts.correct_no_flips, counts.incorrect_no_flips
    flags: list[str] = []
    return ClassificationMetrics(
        (tp + tn) / counts.total,
        _ratio(tp, tp + fp, "precision", flags),
        _ratio(tp, tp + fn, "recall", flags),
        _ratio(tn, tn + fp, "specificity", flags),
        tuple(flags),
    )


# --------------------------------------------------------------------------
# IoU


@dataclass(frozen=True)
class IoUReport:
    micro: float
    macro: float
    per_class: dict  # class -> one-vs-rest IoU, or None when gt and prediction both lack it
    intersections: dict
    unions: dict


def iou(pred_grid: np.ndarray, gt_grid: np.ndarray, classes: Sequence) -> IoUReport:
    """Per-class IoU over grid cells; micro pools counts, macro averages classes.

    Classes absent from both grids have no IoU and are left out of both
    averages.
    """
    pred_grid = np.asarray(pred_grid)
    gt_grid = np.asarray(gt_grid)
    if pred_grid.shape != gt_grid.shape:
        raise ShapeMismatch(f"prediction grid {pred_grid.shape} vs gt grid {gt_grid.shape}")
    per_class, inter, union = {}, {}, {}
    for c in classes:
        p, g = pred_grid == c, gt_grid == c
        i, u = int(np.sum(p & g)), int(np.sum(p | g))
        inter[c], union[c] = i, u
        per_class[c] = i / u if u else None
    defined = [c for c in classes if union[c]]
    if not defined:
        return IoUReport(float("nan"), float("nan"), per_class, inter, union)
    micro = sum(inter[c] for c in defined) / sum(union[c] for c in defined)
    macro = float(np.mean([per_class[c] for c in defined]))
    return IoUReport(micro, macro, per_class, inter, union)


# --------------------------------------------------------------------------
# ROC


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_auc(scores: Sequence[float], binary_labels: Sequence[int | bool]) -> RocCurve:
    """ROC by sweeping thresholds over the distinct scores (descending).

    Equal scores form one step, so ties contribute a diagonal segment; the
    area is the trapezoid rule over the resulting points.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(binary_labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise LengthMismatch(f"{scores.shape} scores vs {labels.shape} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = (last_of_group + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last_of_group]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auc)
