"""Overlap and surface-distance metrics for binary volumes."""
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError, UndefinedMetricError


def _pair(a, b):
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    if a.shape != b.shape:
        raise InputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b):
    a, b = _pair(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def volumetric_similarity(a, b):
    a, b = _pair(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 1.0 - abs(na - nb) / (na + nb)


def surface_voxels(mask):
    """Foreground voxels with a background 6-neighbor or touching the volume border."""
    mask = np.asarray(mask) > 0
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for ax in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=ax)[1:-1, 1:-1, 1:-1]
    return np.argwhere(mask & ~interior)


def _directed(src, dst, spacing):
    sp = np.asarray(spacing, dtype=np.float64)
    d, _ = cKDTree(dst * sp).query(src * sp)
    return d


def nearest_rank(values, pct):
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    v = np.sort(np.asarray(values))
    rank = max(1, int(np.ceil(pct / 100.0 * len(v))))
    return float(v[rank - 1])


def _surfaces(a, b):
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise UndefinedMetricError("surface distance is undefined for an empty mask")
    return surface_voxels(a), surface_voxels(b)


def hd95(a, b, spacing=(1.0, 1.0, 1.0)):
    """Max of the two directed 95th-percentile surface distances, in mm."""
    sa, sb = _surfaces(a, b)
    return max(nearest_rank(_directed(sa, sb, spacing), 95), nearest_rank(_directed(sb, sa, spacing), 95))


def hausdorff(a, b, spacing=(1.0, 1.0, 1.0)):
    """Symmetric Hausdorff distance between the mask surfaces, in mm."""
    sa, sb = _surfaces(a, b)
    return float(max(_directed(sa, sb, spacing).max(), _directed(sb, sa, spacing).max()))


@dataclass
class SegmentationReport:
    dice: float
    hd95_mm: float  # None when undefined (an empty mask)
    vs: float
    hd_mm: float
    voxel_class_ratio: float
    cloud_class_ratio: float
    input: object = None
    inference: object = None

    def row(self):
        fmt = lambda v: "undefined" if v is None else repr(float(v))  # noqa: E731
        return {
            "dice": fmt(self.dice), "hd95_mm": fmt(self.hd95_mm), "vs": fmt(self.vs),
            "hd_mm": fmt(self.hd_mm), "voxel_class_ratio": fmt(self.voxel_class_ratio),
            "cloud_class_ratio": fmt(self.cloud_class_ratio),
        }


def segmentation_report(pred, truth, spacing, cloud_mask=None):
    pred, truth = _pair(pred, truth)
    try:
        h95 = hd95(pred, truth, spacing)
        h = hausdorff(pred, truth, spacing)
    except UndefinedMetricError:
        h95 = h = None
    voxel_ratio = float(truth.mean())
    cloud_ratio = None
    if cloud_mask is not None:
        cm = np.asarray(cloud_mask) > 0
        cloud_ratio = float(truth[cm].mean()) if cm.any() else None
    return SegmentationReport(dice(pred, truth), h95, volumetric_similarity(pred, truth), h,
                              voxel_ratio, cloud_ratio)
