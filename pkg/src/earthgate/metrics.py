"""Patch-level segmentation metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


def confusion_matrix(pred, labels, num_classes: int) -> np.ndarray:
    """``cm[true, pred]`` counts over all positions."""
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.shape != labels.shape:
        raise ValueError(f"prediction/label size mismatch: {pred.size} vs {labels.size}")
    idx = num_classes * labels + pred
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from both prediction and labels."""
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def mean_iou(pred, labels, num_classes: int) -> float:
    return float(np.nanmean(iou_from_confusion(confusion_matrix(pred, labels, num_classes))))


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    domain: str
    per_class_iou: tuple[float, ...]
    miou: float

    @classmethod
    def from_predictions(cls, iteration, domain, pred, labels, num_classes) -> "MetricsRecord":
        iou = iou_from_confusion(confusion_matrix(pred, labels, num_classes))
        return cls(iteration, domain, tuple(float(v) for v in iou), float(np.nanmean(iou)))


def metrics_header(num_classes: int) -> list[str]:
    return ["iteration", "domain", *[f"iou_{c}" for c in range(num_classes)], "miou"]


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def write_metrics(records, fh, num_classes: int) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(metrics_header(num_classes))
    for r in records:
        w.writerow([r.iteration, r.domain, *[_fmt(v) for v in r.per_class_iou], _fmt(r.miou)])


def write_metrics_csv(records, path, num_classes: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_metrics(records, fh, num_classes)
