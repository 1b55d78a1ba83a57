"""Geometric kernels over point clouds.

All functions are pure: randomness comes from an explicit seed or
``numpy.random.Generator`` and no global state is touched.
"""
import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError, InsufficientPointsError

SPACES = ("voxel", "unit_cube")


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    space_tag: str = "voxel"
    probs: np.ndarray = None
    labels: np.ndarray = None
    source_indices: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InputError(f"points must have shape [N, 3], got {pts.shape}")
        if self.space_tag not in SPACES:
            raise InputError(f"space_tag must be one of {SPACES}, got {self.space_tag!r}")
        object.__setattr__(self, "points", pts)
        n = len(pts)
        for name in ("probs", "labels", "source_indices"):
            val = getattr(self, name)
            if val is None:
                continue
            val = np.asarray(val)
            if val.shape != (n,):
                raise InputError(f"{name} has shape {val.shape}, expected ({n},)")
            object.__setattr__(self, name, val)

    def __len__(self):
        return len(self.points)

    def subset(self, idx):
        """Points at ``idx`` with aligned attributes; source_indices map back to this cloud."""
        idx = np.asarray(idx, dtype=np.int64)
        src = idx if self.source_indices is None else self.source_indices[idx]
        return PointCloud(
            self.points[idx],
            self.space_tag,
            None if self.probs is None else self.probs[idx],
            None if self.labels is None else self.labels[idx],
            src,
        )

    def with_points(self, points, space_tag=None):
        return replace(self, points=points, space_tag=space_tag or self.space_tag)

    def with_labels(self, labels):
        return replace(self, labels=np.asarray(labels, dtype=np.int64))


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _coords(cloud):
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def farthest_point_sample(cloud, m, seed=None, first=None):
    """Greedy farthest point sampling of ``m`` indices.

    The first index is ``first`` when given, else drawn from ``seed``.
    Each later pick maximizes the distance to the chosen set; ties go to
    the lowest index.
    """
    pts = _coords(cloud)
    n = len(pts)
    if not 1 <= m <= n:
        raise InputError(f"cannot sample {m} points from a cloud of {n}")
    if first is None:
        first = int(_rng(seed).integers(n))
    out = np.empty(m, dtype=np.int64)
    out[0] = first
    d2 = np.sum((pts - pts[first]) ** 2, axis=1)
    for i in range(1, m):
        j = int(np.argmax(d2))
        out[i] = j
        np.minimum(d2, np.sum((pts - pts[j]) ** 2, axis=1), out=d2)
    return out


def farthest_point_sample_batch(points, m, first):
    """Vectorized FPS over a batch ``points [B, N, 3]`` with given first picks ``[B]``."""
    B, n, _ = points.shape
    if not 1 <= m <= n:
        raise InputError(f"cannot sample {m} points from a cloud of {n}")
    rows = np.arange(B)
    out = np.empty((B, m), dtype=np.int64)
    out[:, 0] = first
    d2 = np.sum((points - points[rows, first][:, None, :]) ** 2, axis=2)
    for i in range(1, m):
        j = np.argmax(d2, axis=1)
        out[:, i] = j
        np.minimum(d2, np.sum((points - points[rows, j][:, None, :]) ** 2, axis=2), out=d2)
    return out


def nearest_sorted(queries, points, k, chunk=1 << 22):
    """Indices of the ``k`` nearest ``points [N, 3]`` to each of ``queries [Q, 3]``.

    Rows are ordered by (distance, index).  Distances come from coordinate
    differences, so they are exactly translation invariant for exactly
    representable inputs.
    """
    n = len(points)
    if k > n:
        raise InsufficientPointsError(k, n)
    step = max(1, chunk // max(n, 1))
    out = np.empty((len(queries), k), dtype=np.int64)
    for s in range(0, len(queries), step):
        out[s:s + step] = _nearest_block(queries[s:s + step], points, k)
    return out


def _nearest_block(queries, points, k):
    n = len(points)
    d2 = np.sum((queries[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    if k == n:
        return np.argsort(d2, axis=-1, kind="stable")
    # k-th smallest value; everything strictly below is in, ties at it go by index
    kth = np.partition(d2, k - 1, axis=-1)[:, k - 1:k]
    below = d2 < kth
    tie = d2 == kth
    need = k - below.sum(axis=-1, keepdims=True)
    keep = below | (tie & (np.cumsum(tie, axis=-1) <= need))
    cand = np.nonzero(keep)[1].reshape(len(queries), k)
    cd = np.take_along_axis(d2, cand, axis=-1)
    order = np.argsort(cd, axis=-1, kind="stable")
    return np.take_along_axis(cand, order, axis=-1)


def knn_dilated(query, cloud, k, d, seed=None):
    """``k`` neighbor indices of one ``query`` point, sampled from its ``d*k`` nearest.

    With ``d == 1`` these are exactly the k nearest (ties by lowest index).
    Otherwise ``k`` of the ``d*k`` nearest are drawn uniformly without
    replacement and returned in distance order.
    """
    pts = _coords(cloud)
    need = d * k
    if len(pts) < need:
        raise InsufficientPointsError(need, len(pts))
    near = nearest_sorted(np.asarray(query, dtype=np.float64)[None, :], pts, need)[0]
    if d == 1:
        return near
    pick = np.sort(_rng(seed).choice(need, size=k, replace=False))
    return near[pick]


@dataclass(frozen=True)
class UnitCubeAffine:
    center: np.ndarray
    scale: float

    def apply(self, pts):
        return (np.asarray(pts) - self.center) / self.scale

    def invert(self, pts):
        return np.asarray(pts) * self.scale + self.center


def normalize_unit_cube(cloud):
    """Center the bounding box at the origin and scale isotropically into [-1, 1]^3."""
    pts = cloud.points
    if len(pts) == 0:
        raise InputError("cannot normalize an empty cloud")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2.0
    half = float(np.max(hi - lo) / 2.0)
    scale = half if half > 0 else 1.0
    aff = UnitCubeAffine(center, scale)
    out = np.clip(aff.apply(pts), -1.0, 1.0)
    return cloud.with_points(out, "unit_cube"), aff


def random_rotation(rng, axis_only=False):
    """Uniform rotation matrix from a random unit quaternion (or about z only)."""
    if axis_only:
        a = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def augment(cloud, seed, jitter_sigma=0.01, jitter_clip=0.05, rotation=None, axis_only=False):
    """Random rotation about the origin followed by clipped Gaussian jitter.

    ``rotation`` forces a specific 3x3 matrix (e.g. the identity).
    """
    rng = _rng(seed)
    R = random_rotation(rng, axis_only) if rotation is None else np.asarray(rotation, dtype=np.float64)
    pts = cloud.points @ R.T
    if jitter_sigma > 0:
        noise = np.clip(rng.normal(0.0, jitter_sigma, pts.shape), -jitter_clip, jitter_clip)
        pts = pts + noise
    return cloud.with_points(pts)


def split_subclouds(cloud, subsize, seed, mode="train"):
    """Cut a cloud into subclouds of exactly ``subsize`` points.

    ``train``: shuffle and partition; the last short chunk (or a cloud
    smaller than ``subsize``) is padded by resampling the full cloud with
    replacement.  ``cover``: draw random subsets, each taking as many
    not-yet-covered points as it can and filling up with random others,
    until every point has been drawn at least once.
    """
    n = len(cloud)
    if n < 1:
        raise InputError("cannot split an empty cloud")
    rng = _rng(seed)
    chunks = []
    if mode == "train":
        perm = rng.permutation(n)
        for start in range(0, n, subsize):
            chunk = perm[start:start + subsize]
            if len(chunk) < subsize:
                chunk = np.concatenate([chunk, rng.integers(0, n, subsize - len(chunk))])
            chunks.append(chunk)
    elif mode == "cover":
        uncovered = rng.permutation(n)
        while len(uncovered):
            take = uncovered[:subsize]
            uncovered = uncovered[subsize:]
            if len(take) < subsize:
                if n >= subsize:
                    rest = np.setdiff1d(np.arange(n), take, assume_unique=True)
                    fill = rng.choice(rest, subsize - len(take), replace=False)
                else:
                    fill = rng.integers(0, n, subsize - len(take))
                take = np.concatenate([take, fill])
            chunks.append(rng.permutation(take))
    else:
        raise InputError(f"unknown split mode {mode!r}")
    return [cloud.subset(c) for c in chunks]


def write_csv(path, cloud):
    cols = ["x", "y", "z"]
    if cloud.probs is not None:
        cols.append("prob")
    if cloud.labels is not None:
        cols.append("label")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i, p in enumerate(cloud.points):
            row = [repr(float(v)) if not float(v).is_integer() else str(int(v)) for v in p]
            if cloud.probs is not None:
                row.append(repr(float(cloud.probs[i])))
            if cloud.labels is not None:
                row.append(str(int(cloud.labels[i])))
            w.writerow(row)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["x", "y", "z"]:
        raise InputError(f"{path}: header must start with x,y,z")
    head = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(head))
    probs = data[:, head.index("prob")] if "prob" in head else None
    labels = data[:, head.index("label")].astype(np.int64) if "label" in head else None
    return PointCloud(data[:, :3], "voxel", probs, labels)
