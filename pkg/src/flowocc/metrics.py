"""Confusion-matrix based IoU metrics for semantic label grids."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from flowocc import EMPTY, IGNORE
from flowocc.errors import InputError, ShapeError


@dataclass
class ConfusionMatrix:
    """Counts indexed ``[gt, pred]`` over ``num_classes`` semantic classes plus EMPTY (row/col 0)."""

    num_classes: int
    counts: np.ndarray = field(default=None)
    ignored: int = 0

    def __post_init__(self):
        n = self.num_classes + 1
        if self.counts is None:
            self.counts = np.zeros((n, n), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (n, n):
            raise ShapeError(f"counts must be {(n, n)}, got {self.counts.shape}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts, self.ignored + other.ignored)


def accumulate(pred: np.ndarray, gt: np.ndarray, cm: ConfusionMatrix) -> ConfusionMatrix:
    """Return ``cm`` plus the counts of one prediction/ground-truth pair; ignore GT cells are skipped."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    n = cm.num_classes + 1
    keep = gt != IGNORE
    p, g = pred[keep], gt[keep]
    if np.any((g < 0) | (g >= n)) or np.any((p < 0) | (p >= n)):
        raise InputError(f"labels must lie in [0, {n}) or be IGNORE in the ground truth")
    counts = np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(cm.num_classes, cm.counts + counts, cm.ignored + int((~keep).sum()))


def _require(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise InputError("confusion matrix is empty")


def class_iou(cm: ConfusionMatrix, c: int) -> float:
    """IoU of class ``c``; NaN when the class appears in neither prediction nor ground truth."""
    _require(cm)
    tp = cm.counts[c, c]
    denom = cm.counts[c, :].sum() + cm.counts[:, c].sum() - tp
    return float(tp / denom) if denom > 0 else float("nan")


def scene_iou(cm: ConfusionMatrix) -> float:
    """Class-agnostic occupied-vs-empty IoU."""
    _require(cm)
    occ = cm.counts[1:, 1:].sum()
    fp = cm.counts[EMPTY, 1:].sum()
    fn = cm.counts[1:, EMPTY].sum()
    denom = occ + fp + fn
    return float(occ / denom) if denom > 0 else float("nan")


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    return np.array([class_iou(cm, c) for c in range(1, cm.num_classes + 1)])


def miou(cm: ConfusionMatrix, include_absent: bool = False) -> float:
    """Mean IoU over semantic classes.

    Classes absent from both prediction and ground truth are left out of the
    mean, or counted as 0 with ``include_absent``.
    """
    ious = per_class_iou(cm)
    if include_absent:
        ious = np.nan_to_num(ious, nan=0.0)
    else:
        ious = ious[~np.isnan(ious)]
    return float(np.mean(ious)) if ious.size else float("nan")


DEFAULT_RANGES = (12.8, 25.6, 51.2)


def range_miou(
    pred: np.ndarray,
    gt: np.ndarray,
    spec,
    num_classes: int,
    ranges=DEFAULT_RANGES,
    sensor_origin=(0.0, 0.0, 0.0),
    include_absent: bool = False,
) -> list[float | None]:
    """mIoU restricted to voxels whose center lies within each range of the sensor.

    An entry is ``None`` when no labelled voxel falls inside that range.
    """
    ranges = list(ranges)
    if any(b < a for a, b in zip(ranges, ranges[1:])):
        raise InputError("ranges must be ascending")
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape or gt.shape != tuple(spec.dims):
        raise ShapeError(f"grids {pred.shape}/{gt.shape} do not match spec dims {spec.dims}")
    dist = np.linalg.norm(spec.centers() - np.asarray(sensor_origin, dtype=np.float64), axis=-1)
    out: list[float | None] = []
    for r in ranges:
        inside = dist <= r
        cm = accumulate(pred[inside], gt[inside], ConfusionMatrix(num_classes))
        out.append(None if cm.total == 0 else miou(cm, include_absent))
    return out


def _pct(x: float, digits: int = 1) -> float | None:
    return None if x is None or np.isnan(x) else round(100.0 * float(x), digits)


def metrics_report(
    cm: ConfusionMatrix,
    class_names: list[str] | None = None,
    range_block: dict[str, float | None] | None = None,
) -> dict:
    """Percent-valued report in the layout of the usual SSC results table."""
    names = class_names or [f"class_{c}" for c in range(1, cm.num_classes + 1)]
    report = {
        "iou": _pct(scene_iou(cm)),
        "per_class_iou": {name: _pct(v) for name, v in zip(names, per_class_iou(cm))},
        "miou": _pct(miou(cm), 2),
        "evaluated_voxels": cm.total,
        "ignored_voxels": cm.ignored,
    }
    if range_block is not None:
        report["range_miou"] = {k: _pct(v, 2) for k, v in range_block.items()}
    return report
