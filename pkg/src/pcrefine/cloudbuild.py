"""Probability volume -> point cloud conversion and per-point patches."""
import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyCloudError, InputError
from .geometry import PointCloud

DEFAULT_THETA = 0.1
DEFAULT_MAX_POINTS = 1_000_000
VOLUME_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class ProbabilityVolume:
    """Voxel grid of foreground probabilities, indexed ``values[x, y, z]``."""
    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3:
            raise InputError(f"volume must be 3-D, got shape {vals.shape}")
        if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
            raise InputError("probabilities must lie in [0, 1]")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise InputError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class StandardizedVolume:
    values: np.ndarray
    spacing: tuple
    mean_used: float
    std_used: float
    degenerate: bool = False

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class PatchSet:
    """``patches[i]`` is the window around point ``i`` of the cloud it was cut for."""
    patches: np.ndarray

    def __len__(self):
        return len(self.patches)

    def take(self, idx):
        return self.patches[np.asarray(idx)]


def threshold_to_cloud(volume, theta=DEFAULT_THETA, max_points=DEFAULT_MAX_POINTS):
    """One point per voxel with probability strictly above ``theta``.

    Points carry integer voxel coordinates and come in scan order with x
    varying fastest, then y, then z.
    """
    if not 0.0 <= theta < 1.0:
        raise InputError(f"theta must lie in [0, 1), got {theta}")
    vals = volume.values
    zyx = np.nonzero(vals.transpose(2, 1, 0) > theta)
    n = len(zyx[0])
    if n == 0:
        raise EmptyCloudError(theta, float(vals.max()) if vals.size else 0.0)
    if max_points is not None and n > max_points:
        raise InputError(f"cloud of {n} points exceeds the cap of {max_points} (theta={theta:g})")
    pts = np.stack([zyx[2], zyx[1], zyx[0]], axis=1)
    return PointCloud(pts.astype(np.float64), "voxel", probs=vals[pts[:, 0], pts[:, 1], pts[:, 2]])


def standardize(volume):
    """Zero-mean, unit-variance rescaling with the population standard deviation."""
    vals = volume.values
    if vals.size == 0:
        raise InputError("cannot standardize an empty volume")
    mu = float(vals.mean())
    sd = float(vals.std())
    degenerate = not sd > 0
    div = 1.0 if degenerate else sd
    return StandardizedVolume((vals - mu) / div, volume.spacing, mu, div, degenerate)


def _voxel_index(cloud, shape):
    pts = cloud.points
    idx = np.rint(pts).astype(np.int64)
    bad = np.nonzero(np.any((idx < 0) | (idx >= np.array(shape)), axis=1) | np.any(idx != pts, axis=1))[0]
    if len(bad):
        raise InputError(f"point {int(bad[0])} at {pts[bad[0]].tolist()} is not a voxel inside shape {tuple(shape)}")
    return idx


def extract_patches(volume, cloud, size=5):
    """``size``^3 windows centered on each point, zero-padded past the border."""
    if size % 2 != 1:
        raise ConfigError(f"patch size must be odd, got {size}")
    idx = _voxel_index(cloud, volume.shape)
    r = size // 2
    padded = np.pad(volume.values, r, mode="constant", constant_values=0.0)
    win = np.lib.stride_tricks.sliding_window_view(padded, (size, size, size))
    return PatchSet(np.ascontiguousarray(win[idx[:, 0], idx[:, 1], idx[:, 2]]))


def cloud_to_volume(cloud, shape):
    """Binary volume with ones at points labelled foreground."""
    if cloud.labels is None:
        raise InputError("cloud_to_volume needs a labelled cloud")
    idx = _voxel_index(cloud, shape)
    out = np.zeros(shape, dtype=np.uint8)
    fg = idx[np.asarray(cloud.labels) == 1]
    out[fg[:, 0], fg[:, 1], fg[:, 2]] = 1
    return out


def point_labels(cloud, mask):
    """Ground-truth class of each voxel point read from a label volume."""
    idx = _voxel_index(cloud, mask.shape)
    return (np.asarray(mask)[idx[:, 0], idx[:, 1], idx[:, 2]] > 0).astype(np.int64)


# file format ----------------------------------------------------------------

def _meta_path(path):
    stem, _ = os.path.splitext(os.fspath(path))
    return stem + ".meta"


def save_volume(path, values, spacing):
    """Raw little-endian float64, x fastest, plus a ``.meta`` sidecar."""
    values = np.asarray(values, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(values.astype("<f8").ravel(order="F").tobytes())
    shape = ",".join(str(n) for n in values.shape)
    sp = ",".join(repr(float(s)) for s in spacing)
    with open(_meta_path(path), "w") as fh:
        fh.write(f"shape={shape}\nspacing={sp}\nformat=f64le\nversion={VOLUME_FORMAT_VERSION}\n")


def load_volume(path):
    """Return ``(values[x, y, z], spacing)``."""
    meta_file = _meta_path(path)
    try:
        with open(meta_file) as fh:
            meta = dict(line.strip().split("=", 1) for line in fh if "=" in line)
        shape = tuple(int(v) for v in meta["shape"].split(","))
        spacing = tuple(float(v) for v in meta["spacing"].split(","))
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read volume header {meta_file}: {exc}") from exc
    if meta.get("format") != "f64le" or meta.get("version") != str(VOLUME_FORMAT_VERSION):
        raise InputError(f"{meta_file}: unsupported format {meta.get('format')} v{meta.get('version')}")
    raw = np.fromfile(path, dtype="<f8")
    if raw.size != int(np.prod(shape)):
        raise InputError(f"{path}: {raw.size} values but header shape {shape}")
    return raw.reshape(shape, order="F").astype(np.float64), spacing


def load_probability_volume(path):
    values, spacing = load_volume(path)
    return ProbabilityVolume(values, spacing)


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
