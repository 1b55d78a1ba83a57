"""Synthetic tubular nerve phantoms and training corpora.

Volumes are indexed ``[x, y, z]`` with z the slice axis.  A nerve is a
stack of in-plane disks along a centerline; its probability map is the
mask scaled by ``q`` and blurred with a truncated Gaussian, while the
ground truth is the sharp mask.
"""
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter

from .cloudbuild import ProbabilityVolume
from .errors import ConfigError, InputError

PROBABILITY_LEVELS = (0.1, 0.3, 0.5, 0.7, 0.9)


@dataclass(frozen=True)
class Distractor:
    """Background structure: a z-aligned tube over ``span`` slices or an ellipsoid blob."""
    kind: str
    center: tuple  # (x, y, z); for tubes z is the first slice
    q: float
    diameter: float = 10.0
    span: int = 1
    radii: tuple = (3.0, 3.0, 1.5)


@dataclass(frozen=True)
class SyntheticSpec:
    shape: tuple = (140, 140, 50)
    spacing: tuple = (1.0, 1.0, 4.4)
    kind: str = "straight"
    # (z, x, y) centerline control points, linearly interpolated; None = volume center
    control_points: tuple = None
    diameter: float = 10.0
    q: float = 0.5
    sigma: float = 1.0
    truncate: float = 4.0
    branch_fraction: float = 0.6
    branch_angle_deg: float = 15.0
    fp_span: int = None
    fp_q: float = 0.9
    fp_offset: float = 30.0
    fp_diameter: float = None
    distractors: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in ("straight", "branching"):
            raise ConfigError(f"nerve kind must be straight or branching, got {self.kind!r}")
        if self.diameter < 1:
            raise ConfigError("diameter must be >= 1")
        if not 0 < self.q <= 1 or not 0 < self.fp_q <= 1:
            raise ConfigError("probabilities q and fp_q must lie in (0, 1]")
        if self.fp_span is not None and not 1 <= self.fp_span <= self.shape[2]:
            raise ConfigError(f"false-positive span must lie in 1..{self.shape[2]}")


def centerline(spec):
    """Per-slice (x, y) centers, one row per z."""
    X, Y, Z = spec.shape
    z = np.arange(Z, dtype=np.float64)
    if spec.control_points is None:
        cx, cy = np.full(Z, X / 2 - 0.5), np.full(Z, Y / 2 - 0.5)
    else:
        cp = np.asarray(spec.control_points, dtype=np.float64)
        cx, cy = np.interp(z, cp[:, 0], cp[:, 1]), np.interp(z, cp[:, 0], cp[:, 2])
    return np.stack([cx, cy], axis=1)


def _disk(shape_xy, cx, cy, diameter):
    x = np.arange(shape_xy[0])[:, None]
    y = np.arange(shape_xy[1])[None, :]
    return (x - cx) ** 2 + (y - cy) ** 2 <= (diameter / 2.0) ** 2


def _check_inside(shape, cx, cy, diameter, what):
    r = diameter / 2.0
    if cx - r < 0 or cy - r < 0 or cx + r > shape[0] - 1 or cy + r > shape[1] - 1:
        raise ConfigError(f"{what} leaves the volume at center ({cx:.1f}, {cy:.1f})")


def nerve_mask(spec):
    X, Y, Z = spec.shape
    mask = np.zeros(spec.shape, dtype=bool)
    centers = centerline(spec)
    zb = int(round(spec.branch_fraction * Z)) if spec.kind == "branching" else Z
    slope = np.tan(np.deg2rad(spec.branch_angle_deg)) * spec.spacing[2] / spec.spacing[0]
    for z in range(Z):
        cx, cy = centers[z]
        if z < zb:
            disks = [(cx, cy)]
        else:
            off = slope * (z - zb + 1)
            disks = [(cx - off, cy), (cx + off, cy)]
        for dx, dy in disks:
            _check_inside(spec.shape, dx, dy, spec.diameter, "nerve")
            mask[:, :, z] |= _disk((X, Y), dx, dy, spec.diameter)
    return mask


def false_positive_mask(spec):
    X, Y, Z = spec.shape
    mask = np.zeros(spec.shape, dtype=bool)
    if spec.fp_span is None:
        return mask
    d = spec.fp_diameter or spec.diameter
    z0 = Z // 2 - spec.fp_span // 2
    centers = centerline(spec)
    for z in range(z0, z0 + spec.fp_span):
        cx, cy = centers[z]
        cy = cy + spec.fp_offset
        _check_inside(spec.shape, cx, cy, d, "false positive")
        mask[:, :, z] = _disk((X, Y), cx, cy, d)
    return mask


def distractor_mask(shape, dist):
    X, Y, Z = shape
    mask = np.zeros(shape, dtype=bool)
    cx, cy, cz = dist.center
    if dist.kind == "tube":
        _check_inside(shape, cx, cy, dist.diameter, "distractor tube")
        z0 = int(cz)
        if z0 < 0 or z0 + dist.span > Z:
            raise ConfigError("distractor tube leaves the volume along z")
        mask[:, :, z0:z0 + dist.span] = _disk((X, Y), cx, cy, dist.diameter)[:, :, None]
    elif dist.kind == "blob":
        rx, ry, rz = dist.radii
        x, y, z = np.ogrid[:X, :Y, :Z]
        mask = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 <= 1.0
    else:
        raise ConfigError(f"unknown distractor kind {dist.kind!r}")
    return mask


def generate_nerve(spec, seed=None):
    """Return ``(ProbabilityVolume, ground_truth uint8)`` for ``spec``.

    ``seed`` is accepted for interface symmetry; generation is fully
    determined by ``spec``.
    """
    gt = nerve_mask(spec)
    prob = spec.q * gt.astype(np.float64)
    extras = []
    if spec.fp_span is not None:
        extras.append((false_positive_mask(spec), spec.fp_q, "false positive"))
    for d in spec.distractors:
        extras.append((distractor_mask(spec.shape, d), d.q, f"{d.kind} distractor"))
    for mask, q, what in extras:
        if np.any(mask & gt):
            raise ConfigError(f"{what} overlaps the nerve")
        prob = np.maximum(prob, q * mask)
    prob = gaussian_filter(prob, sigma=spec.sigma, truncate=spec.truncate, mode="constant")
    prob = np.clip(prob, 0.0, 1.0)
    return ProbabilityVolume(prob, spec.spacing), gt.astype(np.uint8)


@dataclass(frozen=True)
class CorpusRanges:
    diameter: tuple = (8, 12)
    q: tuple = (0.15, 0.95)
    drift: float = 4.0
    center_margin: int = 40
    tubes: tuple = (1, 3)
    tube_span: tuple = (1, 14)
    tube_diameter: tuple = (6, 12)
    blobs: tuple = (0, 2)
    min_gap: float = 4.0
    # most tubes sit beside the nerve, at this in-plane distance from its centerline
    near_fraction: float = 0.75
    near_distance: tuple = (14.0, 45.0)
    # and many are as bright as the nerve, so intensity alone cannot reject them
    matched_fraction: float = 0.5
    matched_delta: float = 0.15


def _random_centerline(rng, shape, ranges):
    X, Y, Z = shape
    m = ranges.center_margin
    c0 = rng.uniform([m, m], [X - m, Y - m])
    zs = np.linspace(0, Z - 1, 6)
    amp = rng.uniform(0, ranges.drift, 2)
    freq = rng.uniform(0.5, 1.0, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    xs = c0[0] + amp[0] * np.sin(2 * np.pi * freq[0] * zs / Z + phase[0])
    ys = c0[1] + amp[1] * np.sin(2 * np.pi * freq[1] * zs / Z + phase[1])
    return tuple(zip(zs.tolist(), xs.tolist(), ys.tolist()))


def _distractor_q(rng, spec, ranges):
    if rng.uniform() < ranges.matched_fraction:
        d = ranges.matched_delta
        return float(np.clip(spec.q + rng.uniform(-d, d), *ranges.q))
    return float(rng.uniform(*ranges.q))


def _place_distractors(rng, spec, ranges, nerve):
    X, Y, Z = spec.shape
    taken = nerve.copy()
    centers = centerline(spec)
    out = []
    n_tubes = rng.integers(ranges.tubes[0], ranges.tubes[1] + 1)
    n_blobs = rng.integers(ranges.blobs[0], ranges.blobs[1] + 1)
    wanted = ["tube"] * int(n_tubes) + ["blob"] * int(n_blobs)
    g = int(np.ceil(ranges.min_gap))
    for kind in wanted:
        for _ in range(200):
            q = _distractor_q(rng, spec, ranges)
            if kind == "tube":
                d = float(rng.integers(ranges.tube_diameter[0], ranges.tube_diameter[1] + 1))
                span = int(rng.integers(ranges.tube_span[0], ranges.tube_span[1] + 1))
                z0 = int(rng.integers(0, Z - span + 1))
                if rng.uniform() < ranges.near_fraction:
                    r, a = rng.uniform(*ranges.near_distance), rng.uniform(0, 2 * np.pi)
                    cx, cy = centers[z0 + span // 2] + r * np.array([np.cos(a), np.sin(a)])
                else:
                    cx, cy = rng.uniform(d / 2 + 1, X - 2 - d / 2), rng.uniform(d / 2 + 1, Y - 2 - d / 2)
                cand = Distractor("tube", (float(cx), float(cy), z0), q, diameter=d, span=span)
            else:
                radii = (float(rng.uniform(2, 6)), float(rng.uniform(2, 6)), float(rng.uniform(1, 3)))
                cand = Distractor("blob", (float(rng.uniform(8, X - 9)), float(rng.uniform(8, Y - 9)),
                                           float(rng.uniform(2, Z - 3))), q, radii=radii)
            try:
                m = distractor_mask(spec.shape, cand)
            except ConfigError:
                continue
            grown = binary_dilation(m, iterations=g) if g else m
            if m.any() and not np.any(grown & taken):
                taken |= m
                out.append(cand)
                break
    return tuple(out)


def random_case_spec(rng, shape=(140, 140, 50), spacing=(1.0, 1.0, 4.4), ranges=CorpusRanges()):
    kind = str(rng.choice(["straight", "branching"]))
    spec = SyntheticSpec(
        shape=shape, spacing=spacing, kind=kind,
        control_points=_random_centerline(rng, shape, ranges),
        diameter=float(rng.integers(ranges.diameter[0], ranges.diameter[1] + 1)),
        q=float(rng.uniform(*ranges.q)),
    )
    nerve = nerve_mask(spec)
    return replace(spec, distractors=_place_distractors(rng, spec, ranges, nerve))


def generate_corpus(n_cases, seed, ranges=CorpusRanges(), shape=(140, 140, 50), spacing=(1.0, 1.0, 4.4)):
    """``n_cases`` randomized cases as a list of (ProbabilityVolume, ground truth, SyntheticSpec)."""
    if n_cases < 1:
        raise InputError(f"n_cases must be >= 1, got {n_cases}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_cases):
        spec = random_case_spec(rng, shape, spacing, ranges)
        vol, gt = generate_nerve(spec)
        out.append((vol, gt, spec))
    return out
