"""Binary classification metrics: confusion counts, accuracy, precision,
recall, F1, and rank-based AUC, plus tile-level model evaluation.

Degenerate 0/0 denominators report 0.0 and set a flag in the report rather
than raising, so batch evaluation stays machine-readable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy.stats import rankdata

from .core import DatasetManifest, ValidationError, load_gray_png

if TYPE_CHECKING:
    from .model import TrainedModel

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("Accuracy", "Precision", "Recall", "F1 Score", "AUC")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValidationError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _check_labels(labels: np.ndarray) -> None:
    bad = set(np.unique(labels)) - {0, 1}
    if bad:
        raise ValidationError(f"labels outside {{0,1}}: {sorted(bad)}")


def _check_scores(scores: np.ndarray) -> None:
    if len(scores) and (scores.min() < 0.0 or scores.max() > 1.0):
        raise ValidationError("scores must be probabilities in [0,1]")


def confusion(scores: Sequence[float], labels: Sequence[int],
              threshold: float) -> ConfusionCounts:
    """Counts at a threshold; prediction is 1 iff score > threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if len(s) != len(y):
        raise ValidationError(f"{len(s)} scores vs {len(y)} labels")
    if len(s) == 0:
        raise ValidationError("no samples to evaluate")
    _check_labels(y)
    _check_scores(s)
    pred = s > threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)), fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)), fn=int(np.sum(~pred & pos)),
    )


def accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total if c.total else 0.0


def precision(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fp) if (c.tp + c.fp) else 0.0


def recall(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fn) if (c.tp + c.fn) else 0.0


def harmonic_f1(precision_value: float, recall_value: float) -> float:
    """Harmonic mean of precision and recall; 0.0 when both are zero."""
    s = precision_value + recall_value
    return 2.0 * precision_value * recall_value / s if s else 0.0


def f1(c: ConfusionCounts) -> float:
    return harmonic_f1(precision(c), recall(c))


def degenerate_flags(c: ConfusionCounts) -> tuple[str, ...]:
    """Metric names whose denominator is zero for these counts."""
    flags = []
    if c.total == 0:
        flags.append("accuracy")
    if c.tp + c.fp == 0:
        flags.append("precision")
    if c.tp + c.fn == 0:
        flags.append("recall")
    if precision(c) + recall(c) == 0:
        flags.append("f1")
    return tuple(flags)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve as the Mann-Whitney rank statistic.

    Equals the fraction of (positive, negative) pairs ranked correctly,
    with ties credited one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if len(s) != len(y):
        raise ValidationError(f"{len(s)} scores vs {len(y)} labels")
    _check_labels(y)
    _check_scores(s)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC undefined: need both classes present")
    ranks = rankdata(s)  # average ranks handle ties with half credit
    rank_sum_pos = float(ranks[y == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    counts: ConfusionCounts
    threshold: float
    degenerate: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "precision": self.precision,
            "recall": self.recall, "f1": self.f1, "auc": self.auc,
            "counts": {"tp": self.counts.tp, "fp": self.counts.fp,
                       "tn": self.counts.tn, "fn": self.counts.fn},
            "threshold": self.threshold,
            "degenerate": list(self.degenerate),
        }


def compute_report(scores: Sequence[float], labels: Sequence[int],
                   threshold: float) -> MetricsReport:
    """All five metrics at a threshold; single-class AUC degrades to 0.0."""
    c = confusion(scores, labels, threshold)
    flags = list(degenerate_flags(c))
    try:
        auc_value = auc(scores, labels)
    except ValidationError:
        auc_value = 0.0
        flags.append("auc")
    return MetricsReport(
        accuracy=accuracy(c), precision=precision(c), recall=recall(c),
        f1=f1(c), auc=auc_value, counts=c, threshold=threshold,
        degenerate=tuple(flags),
    )


def evaluate_tiles(model: "TrainedModel", manifest: DatasetManifest,
                   threshold: float = 0.5) -> MetricsReport:
    """Predict every tile in a labeled manifest and score the predictions."""
    if len(manifest) == 0:
        raise ValidationError("cannot evaluate an empty manifest")
    tiles = [load_gray_png(manifest.resolve(e)) for e in manifest.entries]
    labels = [e.label for e in manifest.entries]
    scores = model.predict_batch(tiles)
    return compute_report(scores, labels, threshold)


def format_report_table(rows: dict[str, MetricsReport]) -> str:
    """Aligned text table, one row per model/split name."""
    name_width = max([len(n) for n in rows] + [len("Model")])
    header = f"{'Model':<{name_width}}  " + "  ".join(
        f"{c:>9}" for c in METRIC_COLUMNS)
    lines = [header, "-" * len(header)]
    for name, r in rows.items():
        vals = (r.accuracy, r.precision, r.recall, r.f1, r.auc)
        lines.append(f"{name:<{name_width}}  "
                     + "  ".join(f"{v:>9.4f}" for v in vals))
    return "\n".join(lines)
