"""Confusion matrices and precision / recall / accuracy / F-score reports.

Zero denominators give 0 and set a ``degenerate`` flag instead of NaN.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError

METRIC_NAMES = ("precision", "recall", "accuracy", "f_score")


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f_score: float
    support: int
    degenerate: bool = False


@dataclass
class MetricsReport:
    precision: float
    recall: float
    accuracy: float
    f_score: float
    per_class: list = field(default_factory=list)
    degenerate: bool = False
    # F1 of the averaged precision and recall; kept for comparison only
    f_of_means: float | None = None
    averaging: str = "binary"

    def as_dict(self):
        return {k: getattr(self, k) for k in METRIC_NAMES}


def confusion(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError(f"label length mismatch: {y_true.size} true vs {y_pred.size} predicted")
    for arr, what in ((y_true, "true"), (y_pred, "predicted")):
        bad = np.flatnonzero((arr < 0) | (arr >= num_classes))
        if bad.size:
            raise DataError(f"{what} label {int(arr[bad[0]])} at index {int(bad[0])} is outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _ratio(num, den):
    return (num / den, False) if den > 0 else (0.0, True)


def _class_metrics(cm, c):
    tp = int(cm[c, c])
    fp = int(cm[:, c].sum()) - tp
    fn = int(cm[c, :].sum()) - tp
    p, dp = _ratio(tp, tp + fp)
    r, dr = _ratio(tp, tp + fn)
    f, df = _ratio(2 * p * r, p + r)
    return ClassMetrics(p, r, f, tp + fn, dp or dr or df)


def _accuracy(cm):
    total = int(cm.sum())
    return _ratio(int(np.trace(cm)), total)


def binary_report(cm, positive_class: int = 1) -> MetricsReport:
    cm = np.asarray(cm)
    if cm.shape != (2, 2):
        raise ContractError(f"binary report needs a 2x2 confusion matrix, got {cm.shape}")
    per_class = [_class_metrics(cm, c) for c in range(2)]
    pos = per_class[positive_class]
    acc, dacc = _accuracy(cm)
    return MetricsReport(
        precision=pos.precision,
        recall=pos.recall,
        accuracy=acc,
        f_score=pos.f_score,
        per_class=per_class,
        degenerate=pos.degenerate or dacc,
        f_of_means=pos.f_score,
        averaging=f"binary(positive={positive_class})",
    )


def macro_report(cm) -> MetricsReport:
    """Unweighted means of one-vs-rest per-class metrics.

    The reported F-score is the mean of per-class F1 values, not the F1 of
    mean precision and mean recall (that one is in ``f_of_means``).
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise ContractError(f"macro report needs a square CxC matrix with C >= 2, got {cm.shape}")
    per_class = [_class_metrics(cm, c) for c in range(cm.shape[0])]
    p = float(np.mean([m.precision for m in per_class]))
    r = float(np.mean([m.recall for m in per_class]))
    f = float(np.mean([m.f_score for m in per_class]))
    acc, dacc = _accuracy(cm)
    return MetricsReport(
        precision=p,
        recall=r,
        accuracy=acc,
        f_score=f,
        per_class=per_class,
        degenerate=dacc or any(m.degenerate for m in per_class),
        f_of_means=_ratio(2 * p * r, p + r)[0],
        averaging="macro",
    )


def report(cm, positive_class: int = 1) -> MetricsReport:
    """Binary report for two classes, macro report otherwise."""
    cm = np.asarray(cm)
    return binary_report(cm, positive_class) if cm.shape == (2, 2) else macro_report(cm)
