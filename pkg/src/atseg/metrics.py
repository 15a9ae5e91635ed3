"""Segmentation evaluation: Dice overlap and surface-distance statistics.

Surface voxels are foreground voxels with at least one six-connected
background (or out-of-bounds) neighbor.  Distances are between voxel centers
in millimeters, i.e. index differences scaled by the voxel spacing.  HD95 and
ASSD are taken over the union multiset of both directed nearest-surface
distance sets, with the 95th percentile linearly interpolated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeError, UndefinedMetricError


@dataclass(frozen=True)
class SegmentationMask:
    """Integer label grid with physical voxel spacing (mm per voxel)."""

    labels: np.ndarray                       # (X, Y, Z) integers
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ShapeError(f"mask labels must be 3-D, got shape {labels.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ShapeError(f"spacing must be strictly positive, got {self.spacing}")
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class MetricReport:
    dsc: float
    hd95_mm: float
    assd_mm: float


def _check_comparable(a: SegmentationMask, b: SegmentationMask) -> None:
    if a.labels.shape != b.labels.shape:
        raise ShapeError(f"mask shapes differ: {a.labels.shape} vs {b.labels.shape}")


def dsc(a: SegmentationMask, b: SegmentationMask, class_id: int = 1) -> float:
    """Dice similarity coefficient for one class; 1.0 if both masks are empty."""
    _check_comparable(a, b)
    fa = a.labels == class_id
    fb = b.labels == class_id
    na, nb = int(fa.sum()), int(fb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(fa, fb).sum()) / (na + nb)


def surface_voxels(fg: np.ndarray) -> np.ndarray:
    """Coordinates (S, 3) of six-connected surface voxels of a boolean grid."""
    fg = np.asarray(fg, dtype=bool)
    padded = np.pad(fg, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1, 1:-1] & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1] & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2] & padded[1:-1, 1:-1, 2:]
    )
    return np.argwhere(fg & ~interior)


def surface_distance_stats(a: SegmentationMask, b: SegmentationMask,
                           class_id: int = 1) -> tuple[float, float]:
    """(HD95, ASSD) in mm between the class surfaces of two masks."""
    _check_comparable(a, b)
    fa = a.labels == class_id
    fb = b.labels == class_id
    if not fa.any() or not fb.any():
        raise UndefinedMetricError(f"class {class_id} has empty foreground; surface metrics undefined")
    spacing = np.asarray(a.spacing, dtype=np.float64)
    sa = surface_voxels(fa) * spacing
    sb = surface_voxels(fb) * spacing
    d_ab = cKDTree(sb).query(sa, k=1)[0]
    d_ba = cKDTree(sa).query(sb, k=1)[0]
    both = np.concatenate([d_ab, d_ba])
    return float(np.percentile(both, 95)), float(both.mean())


def evaluate_mask(pred: SegmentationMask, truth: SegmentationMask,
                  class_id: int = 1) -> MetricReport:
    """DSC/HD95/ASSD triple for one class of a predicted vs reference mask."""
    hd95, assd = surface_distance_stats(pred, truth, class_id)
    return MetricReport(dsc=dsc(pred, truth, class_id), hd95_mm=hd95, assd_mm=assd)
