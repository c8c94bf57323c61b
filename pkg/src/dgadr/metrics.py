"""Accuracy, macro-F1, one-vs-rest AUC and the confusion matrix."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from loguru import logger
from scipy.stats import rankdata

from dgadr.exceptions import MetricsError

# column order of MetricsReport.csv_row (confusion cells follow, row-major)
REPORT_COLUMNS = ("accuracy", "macro_f1", "ovr_auc", "num_samples")


def _as_ids(values: Any, name: str) -> np.ndarray:
    array = np.asarray(values)
    if array.ndim != 1:
        msg = f"{name} must be a vector of class ids"
        raise MetricsError(msg)
    return array.astype(np.int64)


def _paired(predictions: Any, truths: Any) -> tuple[np.ndarray, np.ndarray]:
    predictions = _as_ids(predictions, "predictions")
    truths = _as_ids(truths, "truths")
    if predictions.shape != truths.shape:
        msg = (
            f"predictions ({predictions.size}) and truths ({truths.size}) "
            "differ in length"
        )
        raise MetricsError(msg)
    return predictions, truths


def accuracy(predictions: Any, truths: Any) -> float:
    predictions, truths = _paired(predictions, truths)
    if truths.size == 0:
        msg = "accuracy of an empty sample is undefined"
        raise MetricsError(msg)
    return float(np.mean(predictions == truths))


def confusion_matrix(predictions: Any, truths: Any, num_classes: int) -> np.ndarray:
    """``C[t, p]`` counts samples of true class ``t`` predicted as ``p``."""
    predictions, truths = _paired(predictions, truths)
    for name, ids in (("predictions", predictions), ("truths", truths)):
        if ids.size and (ids.min() < 0 or ids.max() >= num_classes):
            msg = f"{name} contain class ids outside [0, {num_classes})"
            raise MetricsError(msg)
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (truths, predictions), 1)
    return matrix


def per_class_f1(predictions: Any, truths: Any, num_classes: int) -> np.ndarray:
    """F1 per class; 0 where precision + recall is 0."""
    matrix = confusion_matrix(predictions, truths, num_classes)
    true_pos = np.diag(matrix).astype(float)
    predicted = matrix.sum(axis=0)
    actual = matrix.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, true_pos / predicted, 0.0)
        recall = np.where(actual > 0, true_pos / actual, 0.0)
        denom = precision + recall
        return np.where(denom > 0, 2 * precision * recall / denom, 0.0)


def macro_f1(predictions: Any, truths: Any, num_classes: int) -> float:
    """Mean F1 over the classes that occur in ``truths``."""
    predictions, truths = _paired(predictions, truths)
    if truths.size == 0:
        return 0.0
    scores = per_class_f1(predictions, truths, num_classes)
    present = np.unique(truths)
    return float(scores[present].mean())


@dataclass(frozen=True)
class AUCResult:
    value: float
    per_class: dict[int, float]
    skipped_classes: tuple[int, ...]


def ovr_auc_detail(scores: Any, truths: Any, num_classes: int) -> AUCResult:
    """Macro one-vs-rest AUC via the Mann-Whitney rank statistic.

    Ties count one half. Classes without both positives and negatives are
    skipped and reported.

    Raises:
        MetricsError: On malformed scores or when no class is eligible
    """
    scores = np.asarray(scores, dtype=float)
    truths = _as_ids(truths, "truths")
    if scores.shape != (truths.size, num_classes):
        msg = (
            f"scores have shape {scores.shape}, "
            f"expected ({truths.size}, {num_classes})"
        )
        raise MetricsError(msg)
    if not np.allclose(scores.sum(axis=1), 1.0, atol=1e-6):
        msg = "score rows must sum to 1"
        raise MetricsError(msg)

    per_class: dict[int, float] = {}
    skipped: list[int] = []
    for cls in range(num_classes):
        positive = truths == cls
        n_pos = int(positive.sum())
        n_neg = truths.size - n_pos
        if n_pos == 0 or n_neg == 0:
            skipped.append(cls)
            continue
        ranks = rankdata(scores[:, cls])
        u_stat = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
        per_class[cls] = float(u_stat / (n_pos * n_neg))

    if not per_class:
        msg = "no class has both positive and negative samples; AUC undefined"
        raise MetricsError(msg)
    return AUCResult(
        value=float(np.mean(list(per_class.values()))),
        per_class=per_class,
        skipped_classes=tuple(skipped),
    )


def ovr_auc(scores: Any, truths: Any, num_classes: int) -> float:
    return ovr_auc_detail(scores, truths, num_classes).value


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    macro_f1: float
    ovr_auc: float
    confusion: np.ndarray
    per_class_f1: np.ndarray
    skipped_auc_classes: tuple[int, ...] = field(default=())

    @property
    def num_samples(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict[str, Any]:
        """Flat JSON-ready mapping."""
        flat: dict[str, Any] = {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "ovr_auc": None if math.isnan(self.ovr_auc) else self.ovr_auc,
            "num_samples": self.num_samples,
            "skipped_auc_classes": list(self.skipped_auc_classes),
        }
        for cls, value in enumerate(self.per_class_f1):
            flat[f"f1_{cls}"] = float(value)
        size = self.confusion.shape[0]
        for t in range(size):
            for p in range(size):
                flat[f"confusion_{t}_{p}"] = int(self.confusion[t, p])
        return flat

    def csv_columns(self) -> list[str]:
        size = self.confusion.shape[0]
        return [*REPORT_COLUMNS] + [
            f"confusion_{t}_{p}" for t in range(size) for p in range(size)
        ]

    def csv_row(self) -> list[str]:
        """Values in ``csv_columns()`` order, floats at 10 decimals."""
        row = [f"{getattr(self, name):.10f}" for name in REPORT_COLUMNS[:3]]
        row.append(str(self.num_samples))
        row.extend(str(int(v)) for v in self.confusion.ravel())
        return row


def build_report(
    scores: np.ndarray, predictions: np.ndarray, truths: np.ndarray, num_classes: int
) -> MetricsReport:
    """All metrics at once; AUC is NaN (with a warning) if no class is eligible."""
    if np.unique(truths).size < 2:
        logger.warning("AUC undefined: fewer than two classes among the truths")
        auc_value, skipped = float("nan"), tuple(range(num_classes))
    else:
        auc = ovr_auc_detail(scores, truths, num_classes)
        auc_value, skipped = auc.value, auc.skipped_classes
    return MetricsReport(
        accuracy=accuracy(predictions, truths),
        macro_f1=macro_f1(predictions, truths, num_classes),
        ovr_auc=auc_value,
        confusion=confusion_matrix(predictions, truths, num_classes),
        per_class_f1=per_class_f1(predictions, truths, num_classes),
        skipped_auc_classes=skipped,
    )
