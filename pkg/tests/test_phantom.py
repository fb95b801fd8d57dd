import json
import os

import numpy as np

from spinesim.phantom import PhantomCase


def test_ground_truth_inverse_accuracy(phantom_case):
    rng = np.random.default_rng(0)
    x = rng.uniform(5, 40, size=(50, 3))
    y = phantom_case.gt_inverse(x)
    back = phantom_case.gt_map(y)
    assert np.abs(back - x).max() < 1e-10


def test_initial_landmark_error_at_least_four_voxels(phantom_case):
    assert phantom_case.initial_landmark_error() >= 4.0


def test_segmentations_consistent(phantom_case):
    ph = phantom_case
    assert set(ph.vert_labels) <= set(ph.ct_seg.labels_present())
    assert 200 in ph.ct_seg.labels_present()          # cord present
    assert 26 not in ph.ct_seg_primary.labels_present()
    assert 26 in ph.ct_seg_secondary.labels_present()
    # moving segmentation is the pull-back of the fixed one: same label set
    assert set(ph.mri_seg.labels_present()) <= set(ph.ct_seg.labels_present())


def test_landmarks_correspond_through_ground_truth(phantom_case):
    ph = phantom_case
    for f, m in zip(ph.fixed_landmarks, ph.moving_landmarks):
        assert f.level == m.level and f.kind == m.kind
        assert np.abs(ph.gt_map(m.position) - f.position).max() < 1e-8


def test_intensity_remap_is_monotone(phantom_case):
    # moving intensities are a monotone function of the pulled-back CT values
    ph = phantom_case
    mri = ph.mri.data.reshape(-1)
    assert mri.min() >= 0.0
    assert mri.max() <= 1000.0 + 1e-6


def test_write_emits_complete_case(tmp_path):
    ph = PhantomCase(size=24)
    paths = ph.write(str(tmp_path))
    for p in paths.values():
        assert os.path.exists(p)
    with open(tmp_path / "phantom.json") as f:
        meta = json.load(f)
    assert meta["size"] == 24
    assert "initial_landmark_error_mm" in meta
