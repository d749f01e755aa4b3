"""Classification metrics and their cross-fold aggregation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np


class UndefinedMetricError(ValueError):
    """Metric has no defined value on this confusion matrix."""


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [true, predicted]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix counts must be non-negative")

    @classmethod
    def from_pairs(cls, y_true, y_pred, num_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        for t, p in zip(y_true, y_pred):
            counts[t, p] += 1
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def uar(cm: ConfusionMatrix) -> float:
    """Mean per-class recall; classes without support are excluded."""
    support = cm.counts.sum(axis=1)
    present = support > 0
    if not present.any():
        raise UndefinedMetricError("no class has support")
    recalls = np.diag(cm.counts)[present] / support[present]
    return float(recalls.mean())


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise UndefinedMetricError("empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def f1_macro(cm: ConfusionMatrix) -> float:
    """Mean per-class F1.

    Classes with neither support nor predictions are excluded; a class
    with zero precision and recall contributes F1 = 0.
    """
    if cm.total == 0:
        raise UndefinedMetricError("empty confusion matrix")
    support = cm.counts.sum(axis=1)
    predicted = cm.counts.sum(axis=0)
    scores = []
    for c in range(cm.counts.shape[0]):
        if support[c] == 0 and predicted[c] == 0:
            continue
        tp = cm.counts[c, c]
        if tp == 0:
            scores.append(0.0)
            continue
        precision = tp / predicted[c]
        recall = tp / support[c]
        scores.append(2.0 * precision * recall / (precision + recall))
    return float(np.mean(scores))


def aggregate(rows) -> tuple[float, float]:
    """(arithmetic mean, population standard deviation) of fold values."""
    values = np.asarray(list(rows), dtype=np.float64)
    if values.size == 0:
        raise ValueError("nothing to aggregate")
    return float(values.mean()), float(values.std())


def format_metric(value: float) -> str:
    """Three decimals without a leading zero, e.g. .661 or 1.000."""
    text = f"{value:.3f}"
    return text[1:] if text.startswith("0.") else text


def format_mean_std(mean: float, std: float) -> str:
    return f"{format_metric(mean)}±{format_metric(std)}"


@dataclass
class FoldMetrics:
    fold: int
    uar: float
    accuracy: float
    f1_macro: float


@dataclass
class MetricsReport:
    dataset_name: str
    folds: list[FoldMetrics]
    config_fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def aggregate(self) -> dict[str, tuple[float, float]]:
        return {name: aggregate([getattr(f, name) for f in self.folds])
                for name in ("uar", "accuracy", "f1_macro")}

    def aggregate_line(self) -> str:
        agg = self.aggregate()
        return ("UAR {}  Acc {}  F1 {}".format(
            format_mean_std(*agg["uar"]),
            format_mean_std(*agg["accuracy"]),
            format_mean_std(*agg["f1_macro"])))

    def to_json(self) -> str:
        agg = self.aggregate()
        doc = {
            "dataset": self.dataset_name,
            "folds": [{"fold": f.fold, "uar": f.uar, "accuracy": f.accuracy,
                       "f1_macro": f.f1_macro} for f in self.folds],
            "aggregate": {name: {"mean": m, "std": s} for name, (m, s) in agg.items()},
            "std_kind": "population",
            "config_fingerprint": self.config_fingerprint,
        }
        if self.extra:
            doc["extra"] = self.extra
        return json.dumps(doc, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        folds = [FoldMetrics(f["fold"], f["uar"], f["accuracy"], f["f1_macro"])
                 for f in doc["folds"]]
        return cls(dataset_name=doc["dataset"], folds=folds,
                   config_fingerprint=doc.get("config_fingerprint", ""),
                   extra=doc.get("extra", {}))

    def to_csv(self) -> str:
        agg = self.aggregate()
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["fold", "uar", "accuracy", "f1_macro"])
        for f in self.folds:
            writer.writerow([f.fold, repr(f.uar), repr(f.accuracy), repr(f.f1_macro)])
        writer.writerow(["aggregate",
                         format_mean_std(*agg["uar"]),
                         format_mean_std(*agg["accuracy"]),
                         format_mean_std(*agg["f1_macro"])])
        return buf.getvalue()
