"""Confusion-matrix accumulation and segmentation metrics.

Per class c (with TP/FP/FN read off the matrix):
    Acc = TP / (TP + FN)          -- per-class recall
    IoU = TP / (TP + FP + FN)
    F1  = 2 TP / (2 TP + FP + FN)
Zero denominators yield 0.  Means are unweighted over the three classes.
Counts accumulate globally over a split; matrices merge by integer sum, so
workers may accumulate privately and combine afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import NUM_CLASSES, GridError, LabelMap

CLASS_NAMES = ("background", "drivable road", "negative obstacles")


def _as_label_array(x: LabelMap | np.ndarray) -> np.ndarray:
    data = x.data if isinstance(x, LabelMap) else np.asarray(x)
    if not np.issubdtype(data.dtype, np.integer):
        raise GridError(f"labels must be integers, got dtype {data.dtype}")
    if data.size and (data.min() < 0 or data.max() >= NUM_CLASSES):
        raise GridError(f"label indices must lie in [0, {NUM_CLASSES})")
    return data


class ConfusionMatrix:
    """3x3 pixel counts, counts[g][p] = pixels of ground truth g predicted p."""

    def __init__(self, counts: np.ndarray | None = None, num_classes: int = NUM_CLASSES):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (num_classes, num_classes):
                raise GridError(f"counts must be {num_classes}x{num_classes}, got {counts.shape}")
            if (counts < 0).any():
                raise GridError("counts must be non-negative")
        self.counts = counts

    def add(self, pred: LabelMap | np.ndarray, gt: LabelMap | np.ndarray) -> "ConfusionMatrix":
        """Accumulate one prediction/ground-truth pair in place."""
        p = _as_label_array(pred)
        g = _as_label_array(gt)
        if p.shape != g.shape:
            raise GridError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
        flat = self.num_classes * g.reshape(-1) + p.reshape(-1)
        binned = np.bincount(flat, minlength=self.num_classes**2)
        self.counts += binned.reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.num_classes)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and bool((self.counts == other.counts).all())

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def compute(self) -> "MetricsReport":
        """Per-class Acc/IoU/F1 and their unweighted means."""
        if self.total == 0:
            raise GridError("cannot compute metrics from an empty confusion matrix")
        tp = np.diag(self.counts).astype(np.float64)
        fn = self.counts.sum(axis=1) - tp
        fp = self.counts.sum(axis=0) - tp
        with np.errstate(divide="ignore", invalid="ignore"):
            acc = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
            iou = np.where(tp + fp + fn > 0, tp / (tp + fp + fn), 0.0)
            f1 = np.where(2 * tp + fp + fn > 0, 2 * tp / (2 * tp + fp + fn), 0.0)
        return MetricsReport(acc=acc, iou=iou, f1=f1)


@dataclass(frozen=True)
class MetricsReport:
    acc: np.ndarray
    iou: np.ndarray
    f1: np.ndarray

    @property
    def macc(self) -> float:
        return float(self.acc.mean())

    @property
    def miou(self) -> float:
        return float(self.iou.mean())

    @property
    def mf1(self) -> float:
        return float(self.f1.mean())

    def to_dict(self) -> dict:
        per_class = {
            name: {"Acc": float(self.acc[c]), "IoU": float(self.iou[c]), "F1": float(self.f1[c])}
            for c, name in enumerate(CLASS_NAMES)
        }
        return {"classes": per_class, "mAcc": self.macc, "mIoU": self.miou, "mF1": self.mf1}


def format_table(report: MetricsReport) -> str:
    """Plain-text report: per-class Acc/IoU/F1 blocks, then mAcc/mIoU/mF1, in %."""
    header_groups = "".join(f"{name:^24}" for name in CLASS_NAMES)
    lines = [
        " " * 8 + header_groups + f"{'mAcc':>8}{'mIoU':>8}{'mF1':>8}",
        " " * 8 + ("     Acc     IoU      F1" * len(CLASS_NAMES)).replace("  ", " " * 2),
    ]
    cells = []
    for c in range(len(CLASS_NAMES)):
        cells += [report.acc[c], report.iou[c], report.f1[c]]
    cells += [report.macc, report.miou, report.mf1]
    lines.append(" " * 8 + "".join(f"{100 * v:8.2f}" for v in cells))
    return "\n".join(lines)
