"""Pixel-count metrics, tumor-length bins and fold aggregation."""

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict, List, Sequence

import numpy as np

from ..tensor import ShapeError
from .statistics import StatisticsError

EPS = 1e-8
METRIC_NAMES = ("dice", "iou", "fpr", "fnr")
REFERENCE_SIDE = 352


class SizeBin(str, Enum):
    SMALL = "0-110"
    MEDIUM = "111-250"
    LARGE = "250+"


@dataclass(frozen=True)
class PixelCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ImageMetrics:
    image_id: str
    dice: float
    iou: float
    fpr: float
    fnr: float
    tumor_length_px: int
    fold: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class FoldSummary:
    fold_index: int
    count: int
    dice: float
    iou: float
    fpr: float
    fnr: float

    def to_dict(self) -> Dict:
        return asdict(self)


def pixel_counts(pred: np.ndarray, truth: np.ndarray) -> PixelCounts:
    pred = np.asarray(pred) > 0
    truth = np.asarray(truth) > 0
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    return PixelCounts(
        tp=int(np.count_nonzero(pred & truth)),
        fp=int(np.count_nonzero(pred & ~truth)),
        fn=int(np.count_nonzero(~pred & truth)),
        tn=int(np.count_nonzero(~pred & ~truth)),
    )


def _empty_pair(c: PixelCounts) -> bool:
    return c.tp == 0 and c.fp == 0 and c.fn == 0


def dice(c: PixelCounts) -> float:
    if _empty_pair(c):
        return 1.0
    return 2 * c.tp / (2 * c.tp + c.fp + c.fn + EPS)


def iou(c: PixelCounts) -> float:
    if _empty_pair(c):
        return 1.0
    return c.tp / (c.tp + c.fp + c.fn + EPS)


def fpr(c: PixelCounts) -> float:
    return c.fp / (c.fp + c.tn + EPS)


def fnr(c: PixelCounts) -> float:
    if c.tp + c.fn == 0:
        return 0.0
    return c.fn / (c.fn + c.tp + EPS)


def tumor_length(truth: np.ndarray) -> int:
    """Longest bounding-box side of the ground truth, rescaled to a 352x352 frame."""
    rows, cols = np.nonzero(np.asarray(truth) > 0)
    if rows.size == 0:
        return 0
    height, width = np.asarray(truth).shape
    extent_y = (rows.max() - rows.min() + 1) * REFERENCE_SIDE / height
    extent_x = (cols.max() - cols.min() + 1) * REFERENCE_SIDE / width
    return int(round(max(extent_y, extent_x)))


def size_bin(length_px: int) -> SizeBin:
    if length_px <= 110:
        return SizeBin.SMALL
    if length_px <= 250:
        return SizeBin.MEDIUM
    return SizeBin.LARGE


def image_metrics(image_id: str, pred: np.ndarray, truth: np.ndarray, fold: int = 0) -> ImageMetrics:
    counts = pixel_counts(pred, truth)
    return ImageMetrics(image_id=image_id, dice=dice(counts), iou=iou(counts), fpr=fpr(counts),
                        fnr=fnr(counts), tumor_length_px=tumor_length(truth), fold=fold)


def fold_mean(metrics: Sequence[ImageMetrics], fold_index: int = 0) -> FoldSummary:
    """Unweighted per-metric mean over the images of one fold."""
    if not metrics:
        raise StatisticsError("cannot summarize a fold with no images")
    means = {name: float(np.mean([getattr(m, name) for m in metrics])) for name in METRIC_NAMES}
    return FoldSummary(fold_index=fold_index, count=len(metrics), **means)


def cross_fold(summaries: Sequence[FoldSummary]) -> Dict[str, Dict[str, float]]:
    """
    Mean and sample standard deviation (n - 1) of the fold means.

    A single fold reports sd 0.0.
    """
    if not summaries:
        raise StatisticsError("cannot aggregate zero folds")
    result = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(s, name) for s in summaries], dtype=np.float64)
        sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        result[name] = {"mean": float(values.mean()), "sd": sd}
    return result


def size_bin_table(metrics: Sequence[ImageMetrics]) -> List[Dict]:
    """One row per size bin, always three rows; empty bins carry None means."""
    rows = []
    for bin_ in SizeBin:
        members = [m for m in metrics if size_bin(m.tumor_length_px) is bin_]
        row = {"bin": bin_.value, "count": len(members)}
        for name in METRIC_NAMES:
            row[name] = float(np.mean([getattr(m, name) for m in members])) if members else None
        rows.append(row)
    return rows
