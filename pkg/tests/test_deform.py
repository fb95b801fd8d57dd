import numpy as np
import pytest

from spinesim import deform as dm
from spinesim.affine import SimilarityTransform
from spinesim.volume import Volume, smooth_array


def _smooth_volume(seed, n=12, sigma=1.2):
    rng = np.random.default_rng(seed)
    return Volume(data=smooth_array(rng.normal(size=(n, n, n)), sigma)
                  .astype(np.float32), affine=np.eye(4))


def test_pwd_schedule_domain():
    with pytest.raises(ValueError):
        dm.pwd_learning_rate(-1)
    with pytest.raises(ValueError):
        dm.pwd_learning_rate(251)
    # strictly positive everywhere on the domain
    vals = [dm.pwd_learning_rate(s) for s in range(251)]
    assert min(vals) > 0


def test_upsampler_adjoint_dot_test():
    rng = np.random.default_rng(3)
    fdims, stride = (13, 11, 9), 4
    D = dm.DisplacementField.zeros(fdims, np.eye(4), stride=stride)
    up = dm._Upsampler(fdims, D.control_dims, stride)
    x = rng.normal(size=(3, *D.control_dims))
    y = rng.normal(size=(3, *fdims))
    lhs = float((up.up(x) * y).sum())
    rhs = float((x * up.down(y)).sum())
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_regularizer_zero_field_and_gradient_fd():
    D = dm.DisplacementField.zeros((9, 9, 9), np.eye(4), stride=4)
    R, dR = dm.regularizer_R(D, with_grad=True)
    assert R == 0.0
    rng = np.random.default_rng(4)
    D.values[:] = rng.normal(size=D.values.shape) * 0.5
    R, dR = dm.regularizer_R(D, with_grad=True)
    h = 1e-6
    flat = D.values.reshape(-1)
    g = dR.reshape(-1)
    idx = rng.choice(flat.size, size=12, replace=False)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        Rp, _ = dm.regularizer_R(D, with_grad=True)
        flat[i] = orig - h
        Rm, _ = dm.regularizer_R(D, with_grad=True)
        flat[i] = orig
        fd = (Rp - Rm) / (2 * h)
        assert abs(g[i] - fd) < 1e-5 * max(1.0, abs(fd))


def test_mind_max_channel_is_one():
    v = _smooth_volume(5)
    ch = dm.mind_descriptors(v).channels
    assert np.allclose(ch.max(axis=0), 1.0)
    assert ch.min() >= 0


def test_warp_with_identity_is_resample():
    v = _smooth_volume(6)
    A = SimilarityTransform.identity()
    D = dm.DisplacementField.zeros(v.dims, v.affine, stride=4)
    w = dm.warp(v, A, D)
    assert np.allclose(w.data, v.data, atol=1e-5)


def test_warp_constant_shift_matches_direct_sampling():
    v = _smooth_volume(7, n=14)
    A = SimilarityTransform.identity()
    D = dm.DisplacementField.zeros(v.dims, v.affine, stride=4)
    D.values[0] = 1.5          # uniform +1.5 voxel x displacement
    w = dm.warp(v, A, D)
    from spinesim.volume import sample
    pts = np.indices(v.dims, dtype=np.float64).reshape(3, -1).T
    pts[:, 0] += 1.5
    want = sample(v, pts).reshape(v.dims)
    assert np.allclose(w.data, want, atol=1e-5)


def test_total_transform_point_rejects_outside_domain():
    D = dm.DisplacementField.zeros((8, 8, 8), np.eye(4), stride=4)
    A = SimilarityTransform.identity()
    with pytest.raises(dm.DeformError):
        dm.total_transform_point(A, D, [100.0, 0.0, 0.0])


def test_field_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    D = dm.DisplacementField.zeros((9, 9, 9), np.eye(4), stride=4)
    D.values[:] = rng.normal(size=D.values.shape)
    p = tmp_path / "field.nii.gz"
    dm.save_field(D, str(p), lam=0.02, iterations=250)
    back = dm.load_field(str(p))
    assert back.stride == D.stride
    assert back.control_dims == D.control_dims
    assert np.allclose(back.values, D.values, atol=1e-6)


def test_trace_csv_columns(tmp_path):
    rows = [dm.TraceRow(s=0, eta=1.5, S=0.5, R=0.1, L=0.51)]
    p = tmp_path / "trace.csv"
    dm.write_trace_csv(rows, str(p))
    header = p.read_text().splitlines()[0]
    assert header == "s,eta,S,R,L"


def test_registration_reduces_loss_on_tiny_case():
    fixed = _smooth_volume(9, n=16, sigma=1.5)
    rng = np.random.default_rng(9)
    # moving = fixed shifted by one voxel in x with a monotone remap
    shifted = np.roll(fixed.data, 1, axis=0)
    moving = Volume(data=(shifted - shifted.min() + 0.1) ** 1.5, affine=np.eye(4))
    cfg = dm.RegConfig(iterations=40, stride=4)
    D, trace = dm.register_deformable(fixed, moving,
                                      SimilarityTransform.identity(), cfg)
    assert trace[-1].L < trace[0].L
    assert len(trace) == 40
