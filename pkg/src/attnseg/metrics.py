"""Pixel-count confusion tallies and the six segmentation metrics.

All metrics derive from TP/FP/FN/TN pixel counts of binary masks with tumor
encoded as 1. Division-by-zero conventions (documented per field):

* jaccard / dice: no positives anywhere (tp=fp=fn=0) -> 1.0
* precision: nothing predicted positive -> 1.0 if fn == 0 else 0.0
* sensitivity: no actual positives -> 1.0 if fp == 0 else 0.0
* specificity: no actual negatives -> 1.0 if fn == 0 else 0.0

Reports carry an aggregation tag: "per-image" for a single mask pair or the
mean of per-image reports, "global-pool" for metrics of summed counts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

METRIC_FIELDS = ("jaccard", "dice", "sensitivity", "accuracy", "precision", "specificity")


@dataclass
class ConfusionCounts:
    """TP/FP/FN/TN pixel tallies of one predicted-vs-reference mask pair."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


@dataclass
class MetricReport:
    """The six segmentation scores plus the aggregation mode that produced them."""

    jaccard: float
    dice: float
    sensitivity: float
    accuracy: float
    precision: float
    specificity: float
    mode: str = "per-image"

    def as_dict(self) -> dict:
        return asdict(self)

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in METRIC_FIELDS)


def confusion_counts(pred_mask: np.ndarray, gt_mask: np.ndarray) -> ConfusionCounts:
    """Tally TP/FP/FN/TN pixels of two binary masks (tumor = 1)."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} mask is not binary")
    p = pred.astype(bool)
    g = gt.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
    )


def _ratio(num: int, den: int, empty_value: float) -> float:
    return num / den if den else empty_value


def compute_metrics(c: ConfusionCounts, mode: str = "per-image") -> MetricReport:
    """The six metric ratios of one confusion tally."""
    tp, fp, fn, tn = c.tp, c.fp, c.fn, c.tn
    return MetricReport(
        jaccard=_ratio(tp, tp + fp + fn, 1.0),
        dice=_ratio(2 * tp, 2 * tp + fp + fn, 1.0),
        sensitivity=_ratio(tp, tp + fn, 1.0 if fp == 0 else 0.0),
        accuracy=_ratio(tp + tn, tp + fp + fn + tn, 1.0),
        precision=_ratio(tp, tp + fp, 1.0 if fn == 0 else 0.0),
        specificity=_ratio(tn, tn + fp, 1.0 if fn == 0 else 0.0),
        mode=mode,
    )


def mean_report(reports: list[MetricReport]) -> MetricReport:
    """Average per-image reports field by field (per-image-mean aggregation)."""
    if not reports:
        raise ValueError("no reports to aggregate")
    means = {f: float(np.mean([getattr(r, f) for r in reports])) for f in METRIC_FIELDS}
    return MetricReport(mode="per-image-mean", **means)


def pooled_report(counts: list[ConfusionCounts]) -> MetricReport:
    """Metrics of the summed confusion counts (global-pool aggregation)."""
    if not counts:
        raise ValueError("no counts to pool")
    total = counts[0]
    for c in counts[1:]:
        total = total + c
    report = compute_metrics(total, mode="global-pool")
    return report


def write_metrics_csv(path, rows: list[tuple[str, MetricReport]]) -> None:
    """One CSV row per image: image_id followed by the six metrics."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("image_id",) + METRIC_FIELDS)
        for image_id, report in rows:
            writer.writerow((image_id,) + tuple(repr(v) for v in report.values()))


def write_metrics_summary(path, per_image: list[MetricReport],
                          counts: list[ConfusionCounts]) -> dict:
    """JSON summary holding both aggregation modes; returns the payload."""
    payload = {
        "num_images": len(per_image),
        "per_image_mean": mean_report(per_image).as_dict(),
        "global_pool": pooled_report(counts).as_dict(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return payload
