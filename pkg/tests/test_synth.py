from dataclasses import replace

import numpy as np
import pytest

from pcrefine.cloudbuild import threshold_to_cloud
from pcrefine.errors import ConfigError, InputError
from pcrefine.synth import (Distractor, SyntheticSpec, false_positive_mask, generate_corpus, generate_nerve,
                            nerve_mask)


def test_straight_nerve_disk_is_ten_voxels_wide():
    gt = nerve_mask(SyntheticSpec())
    assert gt.shape == (140, 140, 50)
    sl = gt[:, :, 0]
    xs = np.nonzero(sl.any(axis=1))[0]
    assert len(xs) == 10
    assert all(np.array_equal(gt[:, :, z], sl) for z in range(50))


def test_probability_is_blurred_scaled_mask():
    vol, gt = generate_nerve(SyntheticSpec(q=0.5))
    assert vol.spacing == (1.0, 1.0, 4.4)
    assert 0.45 < vol.values.max() <= 0.5
    assert vol.values[70, 70, 25] == pytest.approx(0.5, abs=1e-3)
    assert vol.values[0, 0, 0] == 0.0


def test_ground_truth_independent_of_q():
    _, a = generate_nerve(SyntheticSpec(q=0.1))
    _, b = generate_nerve(SyntheticSpec(q=0.9))
    np.testing.assert_array_equal(a, b)


def test_branching_has_two_components_after_split():
    gt = nerve_mask(SyntheticSpec(kind="branching"))
    from scipy.ndimage import label
    assert label(gt[:, :, 10])[1] == 1
    assert label(gt[:, :, 49])[1] == 2
    # children diverge with increasing z
    def gap(z):
        cols = np.nonzero(gt[:, :, z].any(axis=1))[0]
        return cols.max() - cols.min()
    assert gap(49) > gap(40) > gap(10)


def test_false_positive_span_and_offset():
    spec = SyntheticSpec(fp_span=5, fp_q=0.9)
    m = false_positive_mask(spec)
    zs = np.nonzero(m.any(axis=(0, 1)))[0]
    assert len(zs) == 5 and zs[0] == 25 - 2
    vol, gt = generate_nerve(spec)
    assert not np.any(m & (gt > 0))
    assert vol.values[70, 100, 25] == pytest.approx(0.9, abs=1e-2)


def test_overlapping_distractor_rejected():
    spec = SyntheticSpec(distractors=(Distractor("tube", (70.0, 70.0, 0), 0.5, span=3),))
    with pytest.raises(ConfigError):
        generate_nerve(spec)


def test_low_q_below_clinical_threshold():
    # why synthetic runs threshold at 0.05
    vol, _ = generate_nerve(SyntheticSpec(q=0.1))
    assert vol.values.max() <= 0.1
    assert len(threshold_to_cloud(vol, 0.05)) > 0


def test_corpus_is_seeded_and_varied():
    a = generate_corpus(3, 11)
    b = generate_corpus(3, 11)
    for (va, ga, sa), (vb, gb, sb) in zip(a, b):
        assert va.values.tobytes() == vb.values.tobytes()
        assert sa == sb
    assert len({s.q for _, _, s in a}) == 3
    assert all(len(s.distractors) >= 1 for _, _, s in a)
    with pytest.raises(InputError):
        generate_corpus(0, 1)


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(kind="curly")
    with pytest.raises(ConfigError):
        SyntheticSpec(q=0.0)
    with pytest.raises(ConfigError):
        generate_nerve(replace(SyntheticSpec(), fp_offset=80.0, fp_span=3))
