"""Classification metrics and multi-split aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numcore import ContractError


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    no_predictions: bool = False


@dataclass
class ConfusionReport:
    confusion: np.ndarray  # [predicted, actual]
    accuracy: float
    per_class: list[ClassMetrics]

    def to_dict(self, label_names: Sequence[str] | None = None) -> dict:
        names = label_names or [str(i) for i in range(len(self.per_class))]
        return {
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "per_class": {
                n: {"precision": m.precision, "recall": m.recall, "f1": m.f1,
                    "support": m.support, "no_predictions": m.no_predictions}
                for n, m in zip(names, self.per_class)
            },
        }


def confusion_matrix(predictions, labels, n_classes: int) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (predictions, labels), 1)
    return cm


def confusion_metrics(predictions, labels, n_classes: int) -> ConfusionReport:
    """Accuracy plus per-class precision, recall and F1.

    A class that is never predicted gets precision and F1 of 0 and is flagged.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ContractError(f"{len(predictions)} predictions for {len(labels)} labels")
    if predictions.size == 0:
        raise ContractError("no predictions to score")
    return report_from_confusion(confusion_matrix(predictions, labels, n_classes))


def report_from_confusion(cm: np.ndarray) -> ConfusionReport:
    total = cm.sum()
    per_class = []
    for c in range(cm.shape[0]):
        tp = cm[c, c]
        predicted = cm[c, :].sum()
        actual = cm[:, c].sum()
        precision = tp / predicted if predicted else 0.0
        recall = tp / actual if actual else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class.append(ClassMetrics(float(precision), float(recall), float(f1), int(actual), bool(predicted == 0)))
    return ConfusionReport(cm, float(np.trace(cm) / total), per_class)


def aggregate_runs(accuracies: Sequence[float]) -> tuple[float, float, str]:
    """Mean, population standard deviation, and the ``0.xxx±0.yyy`` cell string."""
    if len(accuracies) == 0:
        raise ContractError("need at least one run")
    a = np.asarray(accuracies, dtype=np.float64)
    m, s = float(a.mean()), float(a.std(ddof=0))
    return m, s, f"{m:.3f}±{s:.3f}"


def results_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
