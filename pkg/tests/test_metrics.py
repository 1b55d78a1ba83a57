import numpy as np
import pytest

from pcrefine.errors import InputError, UndefinedMetricError
from pcrefine.metrics import (dice, hausdorff, hd95, nearest_rank, segmentation_report, surface_voxels,
                              volumetric_similarity)


def surface_oracle(m):
    out = []
    X, Y, Z = m.shape
    for x, y, z in np.argwhere(m):
        for dx, dy, dz in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]:
            a, b, c = x + dx, y + dy, z + dz
            if not (0 <= a < X and 0 <= b < Y and 0 <= c < Z) or not m[a, b, c]:
                out.append((x, y, z))
                break
    return out


def hd95_oracle(a, b, sp):
    sa = np.array(surface_oracle(a), float) * sp
    sb = np.array(surface_oracle(b), float) * sp
    d = np.sqrt(((sa[:, None] - sb[None]) ** 2).sum(-1))
    da, db = np.sort(d.min(1)), np.sort(d.min(0))
    pick = lambda v: v[int(np.ceil(0.95 * len(v))) - 1]  # noqa: E731
    return max(pick(da), pick(db)), max(da[-1], db[-1])


def test_dice_and_vs_basics():
    a = np.zeros((3, 3, 3))
    a[0, 0, 0] = 1
    assert dice(a, a) == 1.0 and volumetric_similarity(a, a) == 1.0
    b = np.zeros_like(a)
    b[2, 2, 2] = 1
    assert dice(a, b) == 0.0
    assert volumetric_similarity(a, b) == 1.0
    assert dice(b * 0, b * 0) == 1.0


def test_vs_volume_ratio():
    a = np.zeros((4, 4, 4))
    b = np.zeros((4, 4, 4))
    a[:1] = 1
    b[:3] = 1
    assert volumetric_similarity(a, b) == pytest.approx(1 - 2 / 4)


def test_shape_mismatch():
    with pytest.raises(InputError):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_hd95_shift_anisotropic():
    a = np.zeros((5, 5, 6), bool)
    a[1:4, 1:4, 1:3] = True
    b = np.roll(a, 1, axis=2)
    assert hausdorff(a, b, (1.0, 1.0, 4.4)) == pytest.approx(4.4)
    assert hd95(a, a, (1.0, 1.0, 4.4)) == 0.0


def test_hd95_empty_undefined():
    a = np.zeros((3, 3, 3))
    b = a.copy()
    b[1, 1, 1] = 1
    with pytest.raises(UndefinedMetricError):
        hd95(a, b)
    rep = segmentation_report(a, b, (1, 1, 1))
    assert rep.hd95_mm is None and rep.row()["hd95_mm"] == "undefined"


def test_nearest_rank():
    assert nearest_rank(np.arange(1, 101), 95) == 95
    assert nearest_rank([3.0], 95) == 3.0
    assert nearest_rank([1, 2], 95) == 2


def test_surface_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        m = rng.uniform(size=(5, 6, 4)) < 0.6
        got = sorted(map(tuple, surface_voxels(m)))
        assert got == sorted(surface_oracle(m))


def test_hd95_matches_all_pairs_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        shape = tuple(int(s) for s in rng.integers(2, 9, 3))
        a = rng.uniform(size=shape) < rng.uniform(0.05, 0.7)
        b = rng.uniform(size=shape) < rng.uniform(0.05, 0.7)
        a.flat[rng.integers(a.size)] = True
        b.flat[rng.integers(b.size)] = True
        sp = np.array([1.0, rng.uniform(0.5, 2), rng.choice([1.0, 4.4])])
        h95, h = hd95_oracle(a, b, sp)
        assert hd95(a, b, sp) == pytest.approx(h95, abs=1e-12)
        assert hausdorff(a, b, sp) == pytest.approx(h, abs=1e-12)


def test_report_class_ratios():
    truth = np.zeros((10, 10, 10), bool)
    truth[:1, :1, :] = True
    cloud = truth.copy()
    cloud[1, 1, :] = True
    rep = segmentation_report(truth, truth, (1, 1, 1), cloud)
    assert rep.voxel_class_ratio == pytest.approx(0.01)
    assert rep.cloud_class_ratio == pytest.approx(0.5)
    assert rep.dice == 1.0 and rep.hd_mm == 0.0
