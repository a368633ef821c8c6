"""Confusion matrices, binary metrics, majority voting and split statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import betainc

from .errors import DataError, LabelError, ShapeError

RATE_METRICS = ("accuracy", "precision", "recall", "specificity", "f1")


@dataclass
class ConfusionMatrix:
    """Rows are actual classes, columns predicted classes.

    Counts are reals so that matrices averaged over splits stay representable.
    """

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def to_list(self) -> list:
        return self.counts.tolist()


@dataclass
class MetricsReport:
    accuracy: float
    confusion: ConfusionMatrix
    precision: float | None = None
    recall: float | None = None
    specificity: float | None = None
    f1: float | None = None
    positive_class: int | None = None
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in RATE_METRICS}
        d["positive_class"] = self.positive_class
        d["confusion"] = self.confusion.to_list()
        d.update(self.extra)
        return d


def confusion_matrix(actual: Sequence[int], predicted: Sequence[int], num_classes: int) -> ConfusionMatrix:
    a = np.asarray(actual, dtype=np.int64).ravel()
    p = np.asarray(predicted, dtype=np.int64).ravel()
    if a.shape != p.shape:
        raise ShapeError(f"{a.size} actual labels but {p.size} predictions")
    for name, arr in (("actual", a), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise LabelError(f"{name} labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes))
    np.add.at(counts, (a, p), 1.0)
    return ConfusionMatrix(counts)


def _ratio(num, den):
    return float(num / den) if den > 0 else 0.0


def binary_metrics(cm: ConfusionMatrix, positive_class: int = 1) -> MetricsReport:
    """Accuracy, precision, recall, specificity and F1 of a 2x2 matrix.

    A rate whose denominator is zero is reported as 0, and F1 is 0 when
    precision + recall is 0.
    """
    c = cm.counts
    if c.shape != (2, 2):
        raise ShapeError(f"binary metrics need a 2x2 matrix, got {c.shape}")
    neg = 1 - positive_class
    tp, fn = c[positive_class, positive_class], c[positive_class, neg]
    fp, tn = c[neg, positive_class], c[neg, neg]
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2.0 * precision * recall, precision + recall)
    return MetricsReport(
        accuracy=_ratio(tn + tp, tn + tp + fn + fp),
        confusion=cm,
        precision=precision,
        recall=recall,
        specificity=_ratio(tn, tn + fp),
        f1=f1,
        positive_class=positive_class,
    )


def multiclass_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.counts.sum()
    if total <= 0:
        raise DataError("confusion matrix is empty")
    return float(np.trace(cm.counts) / total)


def evaluate_predictions(actual, predicted, num_classes: int, positive_class: int = 1) -> MetricsReport:
    """Binary metrics for two classes, accuracy only otherwise."""
    cm = confusion_matrix(actual, predicted, num_classes)
    if num_classes == 2:
        return binary_metrics(cm, positive_class)
    return MetricsReport(accuracy=multiclass_accuracy(cm), confusion=cm)


def majority_vote(votes: Sequence[int]) -> int:
    """Most frequent class id; ties go to the lowest id."""
    v = np.asarray(votes, dtype=np.int64).ravel()
    if v.size == 0:
        raise DataError("majority vote over an empty sequence")
    if v.min() < 0:
        raise LabelError("class ids must be non-negative")
    return int(np.bincount(v).argmax())


class TTestResult(NamedTuple):
    statistic: float
    df: int
    pvalue: float


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired Student's t-test on ``a - b``.

    With zero spread in the differences the result is degenerate: p = 1 when
    the mean difference is also zero, p = 0 otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise DataError("paired t-test needs at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, df, 1.0)
        return TTestResult(float(np.copysign(np.inf, mean)), df, 0.0)
    t = mean / (sd / np.sqrt(n))
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTestResult(float(t), df, min(max(p, 0.0), 1.0))


def aggregate_splits(reports: Sequence[MetricsReport]) -> dict:
    """Mean and sample standard deviation of every metric, plus the mean confusion matrix."""
    if not reports:
        raise DataError("no reports to aggregate")
    mean, std = {}, {}
    for key in RATE_METRICS:
        vals = [getattr(r, key) for r in reports]
        if any(v is None for v in vals):
            continue
        arr = np.asarray(vals, dtype=np.float64)
        mean[key] = float(arr.mean())
        std[key] = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    confusion = np.mean([r.confusion.counts for r in reports], axis=0)
    return {"mean": mean, "std": std, "confusion_avg": ConfusionMatrix(confusion)}
