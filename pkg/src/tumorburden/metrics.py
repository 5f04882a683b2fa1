"""Overlap and surface-distance metrics between predicted and reference masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .volume import BinaryMask, LabelVolume, boundary_array, class_mask


class MaskMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class ClassMetrics:
    dice: float
    iou: float
    h95_mm: float
    sensitivity: float
    specificity: float
    counts: ConfusionCounts
    flags: list[str] = field(default_factory=list)


@dataclass
class MetricReport:
    per_class: dict[str, ClassMetrics]


def _check(p: BinaryMask, gt: BinaryMask, spacing: bool = False) -> None:
    if p.dims != gt.dims:
        raise MaskMismatchError(f"mask dims differ: {p.dims} vs {gt.dims}")
    if spacing and p.spacing != gt.spacing:
        raise MaskMismatchError(f"mask spacing differs: {p.spacing} vs {gt.spacing}")


def confusion(p: BinaryMask, gt: BinaryMask) -> ConfusionCounts:
    _check(p, gt)
    a, b = p.data, gt.data
    tp = int(np.count_nonzero(a & b))
    fp = int(np.count_nonzero(a & ~b))
    fn = int(np.count_nonzero(~a & b))
    return ConfusionCounts(tp, fp, fn, a.size - tp - fp - fn)


def dice(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return 2 * c.tp / denom


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return c.tp / denom


def sensitivity(c: ConfusionCounts) -> float:
    denom = c.tp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def specificity(c: ConfusionCounts) -> float:
    denom = c.tn + c.fp
    return 1.0 if denom == 0 else c.tn / denom


def _boundary_mm(mask: BinaryMask) -> tuple[np.ndarray, np.ndarray]:
    idx = np.argwhere(boundary_array(mask.data))
    return idx, idx * np.array(mask.spacing.as_tuple())


def point_distances(a_idx: np.ndarray, b_idx: np.ndarray, spacing) -> np.ndarray:
    """Distances (mm) between voxel index rows, from integer offsets."""
    d = (a_idx - b_idx) * np.asarray(spacing, dtype=float)
    return np.sqrt((d * d).sum(axis=-1))


def directed_distances(a: BinaryMask, b: BinaryMask) -> np.ndarray:
    """Nearest-neighbour distance (mm) from every boundary voxel of ``a`` to the boundary of ``b``.

    The KD-tree locates the neighbour; candidates within a relative 1e-9 of
    the tree distance are re-scored from integer offsets so that equidistant
    neighbours cannot change the last bit of the result.
    """
    a_idx, a_mm = _boundary_mm(a)
    b_idx, b_mm = _boundary_mm(b)
    if not len(a_idx) or not len(b_idx):
        return np.zeros(0)
    spacing = a.spacing.as_tuple()
    tree = cKDTree(b_mm)
    dist, _ = tree.query(a_mm, k=1)
    radius = dist * (1 + 1e-9) + 1e-12
    near = tree.query_ball_point(a_mm, radius)
    counts = np.fromiter((len(n) for n in near), dtype=np.int64, count=len(near))
    owner = np.repeat(np.arange(len(a_idx)), counts)
    flat = np.fromiter((j for n in near for j in n), dtype=np.int64, count=int(counts.sum()))
    d = point_distances(a_idx[owner], b_idx[flat], spacing)
    return np.minimum.reduceat(d, np.concatenate(([0], np.cumsum(counts)[:-1])))


def hausdorff95(p: BinaryMask, gt: BinaryMask) -> float:
    """Max of the two directed 95th-percentile boundary distances (mm).

    Both masks empty gives 0; exactly one empty gives ``inf``.
    """
    _check(p, gt, spacing=True)
    p_empty, gt_empty = not p.data.any(), not gt.data.any()
    if p_empty and gt_empty:
        return 0.0
    if p_empty or gt_empty:
        return math.inf
    forward = np.percentile(directed_distances(p, gt), 95)
    backward = np.percentile(directed_distances(gt, p), 95)
    return float(max(forward, backward))


def class_metrics(p: BinaryMask, gt: BinaryMask) -> ClassMetrics:
    c = confusion(p, gt)
    flags = []
    p_empty, gt_empty = c.tp + c.fp == 0, c.tp + c.fn == 0
    if p_empty and gt_empty:
        flags.append("both_empty")
    elif p_empty or gt_empty:
        flags.append("one_empty")
    if c.tp + c.fn == 0:
        flags.append("sensitivity_undefined")
    if c.tn + c.fp == 0:
        flags.append("specificity_undefined")
    h95 = hausdorff95(p, gt)
    if math.isinf(h95):
        flags.append("h95_undefined")
    return ClassMetrics(dice(c), iou(c), h95, sensitivity(c), specificity(c), c, flags)


def evaluate(pred: LabelVolume, gt: LabelVolume, classes=("et", "ed", "cavity")) -> MetricReport:
    if pred.dims != gt.dims:
        raise MaskMismatchError(f"volume dims differ: {pred.dims} vs {gt.dims}")
    if pred.spacing != gt.spacing:
        raise MaskMismatchError(f"volume spacing differs: {pred.spacing} vs {gt.spacing}")
    return MetricReport({name: class_metrics(class_mask(pred, name), class_mask(gt, name)) for name in classes})
