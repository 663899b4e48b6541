"""Pixel metrics (P, R, F1, DC, IoU) and fold aggregation.

All metrics are reported in percent. When prediction and ground truth are
both empty (``tp + fp + fn == 0``) every metric is 100.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

METRIC_NAMES = ("P", "R", "F1", "DC", "IoU")


def binarize(y_p, threshold: float = 0.5) -> np.ndarray:
    """1 where ``y_p > threshold`` (strictly), else 0."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return (np.asarray(y_p) > threshold).astype(np.uint8)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def _as_binary(mask, name):
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be binary (values 0/1)")
    return arr.astype(bool)


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    pred = _as_binary(pred_mask, "pred_mask")
    gt = _as_binary(gt_mask, "gt_mask")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def metrics_from_counts(counts: ConfusionCounts) -> dict[str, float]:
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if tp + fp + fn == 0:
        return dict.fromkeys(METRIC_NAMES, 100.0)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return {
        "P": 100.0 * p,
        "R": 100.0 * r,
        "F1": 100.0 * f1,
        "DC": 100.0 * 2 * tp / (2 * tp + fp + fn),
        "IoU": 100.0 * tp / (tp + fp + fn),
    }


def soft_dice(y_p, y_t) -> float:
    """Unthresholded Dice on probabilities, in percent (no smoothing)."""
    y_p = np.asarray(y_p, dtype=np.float64)
    y_t = np.asarray(y_t, dtype=np.float64)
    denom = y_p.sum() + y_t.sum()
    return 100.0 if denom == 0 else float(200.0 * np.sum(y_p * y_t) / denom)


@dataclass
class MetricsReport:
    """Per-image rows ``(image_id, metrics)`` plus mean/std over images."""

    per_image: list[tuple[str, dict[str, float]]]
    fold_id: int | None = None
    pooled: dict[str, float] | None = None
    mean: dict[str, float] = field(init=False)
    std: dict[str, float] = field(init=False)

    def __post_init__(self):
        rows = np.array([[m[k] for k in METRIC_NAMES] for _, m in self.per_image]) \
            if self.per_image else np.zeros((0, len(METRIC_NAMES)))
        self.mean = dict(zip(METRIC_NAMES, rows.mean(axis=0).tolist())) if len(rows) else {}
        self.std = dict(zip(METRIC_NAMES, rows.std(axis=0).tolist())) if len(rows) else {}

    @property
    def aggregate(self) -> dict[str, float]:
        """The metrics a fold is judged by: pooled if computed, else the mean."""
        return self.pooled if self.pooled is not None else self.mean


def evaluate_masks(probs, gts, image_ids, threshold: float = 0.5,
                   fold_id: int | None = None, pooled: bool = False) -> MetricsReport:
    """Threshold ``probs`` and score every image against its ground truth.

    ``probs`` and ``gts`` are sequences (or leading-axis arrays) of equal-size
    images. With ``pooled=True`` the report also carries metrics computed on
    confusion counts summed over all images.
    """
    rows = []
    total = ConfusionCounts(0, 0, 0, 0)
    for image_id, prob, gt in zip(image_ids, probs, gts):
        counts = confusion(binarize(prob, threshold), gt)
        total = total + counts
        rows.append((str(image_id), metrics_from_counts(counts)))
    return MetricsReport(rows, fold_id, metrics_from_counts(total) if pooled else None)


@dataclass
class FoldSummary:
    mean: dict[str, float]
    std: dict[str, float]
    best_fold: int
    best: dict[str, float]


def aggregate_folds(reports: list[MetricsReport]) -> FoldSummary:
    """Mean and population std of each fold's aggregate; best fold by F1.

    Ties on F1 go to the lowest fold id, so the result does not depend on the
    order of ``reports``.
    """
    if not reports:
        raise ValueError("need at least one fold report")
    ordered = sorted(reports, key=lambda r: (r.fold_id is None, r.fold_id or 0))
    table = np.array([[r.aggregate[k] for k in METRIC_NAMES] for r in ordered])
    best_idx = max(range(len(ordered)), key=lambda i: (table[i, 2], -i))
    best = ordered[best_idx]
    return FoldSummary(
        mean=dict(zip(METRIC_NAMES, table.mean(axis=0).tolist())),
        std=dict(zip(METRIC_NAMES, table.std(axis=0).tolist())),
        best_fold=best.fold_id if best.fold_id is not None else best_idx,
        best=dict(best.aggregate),
    )


def format_metrics_table(reports: list[MetricsReport], delimiter: str = ",") -> str:
    """Columns fold, image_id, P, R, F1, DC, IoU; MEAN/STD rows per fold."""
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(["fold", "image_id", *METRIC_NAMES])
    for report in reports:
        fold = "" if report.fold_id is None else report.fold_id
        for image_id, m in report.per_image:
            writer.writerow([fold, image_id, *(f"{m[k]:.4f}" for k in METRIC_NAMES)])
        writer.writerow([fold, "MEAN", *(f"{report.mean[k]:.4f}" for k in METRIC_NAMES)])
        writer.writerow([fold, "STD", *(f"{report.std[k]:.4f}" for k in METRIC_NAMES)])
    return buf.getvalue()
