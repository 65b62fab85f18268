"""Confusion matrix and classification scores."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label/prediction length mismatch {y_true.shape} vs {y_pred.shape}")
    for arr, what in ((y_true, "label"), (y_pred, "prediction")):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{what} outside 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def _weighted(values, weights) -> float | None:
    pairs = [(v, w) for v, w in zip(values, weights) if v is not None]
    total = sum(w for _, w in pairs)
    return math.fsum(v * w for v, w in pairs) / total if total else None


@dataclass
class MetricsReport:
    """Scores derived from one confusion matrix.

    Per-class recall is ``None`` for a class absent from the test set, and
    precision is ``None`` for a class that was never predicted; undefined
    entries are left out of the macro and weighted averages.  F-scores use
    the count form ``(1+b^2)TP / ((1+b^2)TP + b^2 FN + FP)``, which equals the
    harmonic form whenever both precision and recall are defined.
    """

    confusion: np.ndarray
    beta: float = 1.0
    accuracy: float = field(init=False)
    support: list = field(init=False)
    precision: list = field(init=False)
    recall: list = field(init=False)
    f_score: list = field(init=False)

    def __post_init__(self):
        cm = np.asarray(self.confusion, dtype=np.int64)
        if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {cm.shape}")
        if (cm < 0).any():
            raise ValueError("confusion matrix has negative counts")
        self.confusion = cm
        total = int(cm.sum())
        self.accuracy = int(np.trace(cm)) / total if total else float("nan")
        b2 = self.beta * self.beta
        self.support, self.precision, self.recall, self.f_score = [], [], [], []
        for k in range(cm.shape[0]):
            tp = int(cm[k, k])
            fn = int(cm[k].sum()) - tp
            fp = int(cm[:, k].sum()) - tp
            self.support.append(tp + fn)
            self.recall.append(tp / (tp + fn) if tp + fn else None)
            self.precision.append(tp / (tp + fp) if tp + fp else None)
            denom = (1 + b2) * tp + b2 * fn + fp
            self.f_score.append((1 + b2) * tp / denom if tp + fn else None)

    @property
    def n_classes(self) -> int:
        return self.confusion.shape[0]

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def errors(self) -> int:
        return self.total - int(np.trace(self.confusion))

    @property
    def f1(self) -> list:
        return self.f_score

    @property
    def macro(self) -> dict:
        return {"precision": _mean(self.precision), "recall": _mean(self.recall), "f_score": _mean(self.f_score)}

    @property
    def weighted(self) -> dict:
        w = self.support
        return {"precision": _weighted(self.precision, w), "recall": _weighted(self.recall, w),
                "f_score": _weighted(self.f_score, w)}

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "total": self.total,
            "errors": self.errors,
            "accuracy": self.accuracy,
            "beta": self.beta,
            "macro": self.macro,
            "weighted": self.weighted,
            "per_class": [
                {"class": k, "support": self.support[k], "precision": self.precision[k],
                 "recall": self.recall[k], "f_score": self.f_score[k]}
                for k in range(self.n_classes)
            ],
            "confusion": self.confusion.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        """One row per class plus a final macro row."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "support", "precision", "recall", "f_score"])

        def fmt(v):
            return "" if v is None else repr(float(v))
        for k in range(self.n_classes):
            w.writerow([k, self.support[k], fmt(self.precision[k]), fmt(self.recall[k]), fmt(self.f_score[k])])
        m = self.macro
        w.writerow(["macro", self.total, fmt(m["precision"]), fmt(m["recall"]), fmt(m["f_score"])])
        return buf.getvalue()


def report_from_predictions(y_true, y_pred, n_classes: int, beta: float = 1.0) -> MetricsReport:
    return MetricsReport(confusion_matrix(y_true, y_pred, n_classes), beta)
