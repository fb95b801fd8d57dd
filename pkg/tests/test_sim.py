import numpy as np
import pytest

from spinesim.meshing import marching_cubes
from spinesim.sim import CarveCommand, SimConfig, SimError, SimSession, Tool
from spinesim.volume import LabelMap

from conftest import make_carve_model


@pytest.fixture()
def session(carve_model):
    return SimSession(carve_model)


def _burr(seq, tip, r=3.0):
    return CarveCommand(seq=seq, tool=Tool(kind="burr", radius_mm=r), tip=tip)


def test_protected_voxels_never_removed(session):
    cord = np.argwhere(session.grid == 200)
    tip = session.voxel_to_world(cord.mean(axis=0))[0]
    before = int((session.grid == 200).sum())
    res = session.apply_carve(_burr(0, tip, r=5.0))
    assert res.violation
    assert 200 not in res.removed
    assert int((session.grid == 200).sum()) == before


def test_carve_in_air_removes_nothing(session):
    res = session.apply_carve(_burr(0, [-50.0, -50.0, -50.0]))
    assert res.removed == {} and not res.violation and res.dirty_chunks == []


def test_probe_tools_do_not_carve(session):
    tip = session.voxel_to_world([[16, 16, 3]])[0]
    res = session.apply_carve(CarveCommand(seq=0, tool=Tool(kind="woodson"),
                                           tip=tip))
    assert not res.applied and res.removed == {}


def test_seq_must_increase(session):
    session.apply_carve(_burr(5, [0, 0, 0.0]))
    with pytest.raises(SimError, match="not increasing"):
        session.apply_carve(_burr(5, [0, 0, 0.0]))


def test_undo_restores_bit_exact(session):
    initial = session.grid.copy()
    tip = session.voxel_to_world([[16, 16, 3]])[0]
    res = session.apply_carve(_burr(0, tip, r=4.0))
    assert res.removed
    assert not np.array_equal(session.grid, initial)
    session.undo()
    assert np.array_equal(session.grid, initial)
    assert all(v == 0 for v in session.ledger.values())


def test_undo_empty_stack_is_noop(session):
    assert session.undo() == []


def test_chunk_meshes_union_equals_whole_grid_mesh(session):
    tip = session.voxel_to_world([[16, 16, 3]])[0]
    session.apply_carve(_burr(0, tip, r=4.0))
    # gather all chunk triangles for the bone label and compare with a fresh
    # whole-grid extraction (triangle sets, order-independent)
    def tri_set(mesh):
        tris = mesh.vertices[mesh.triangles].round(6)
        return {tuple(sorted(map(tuple, t))) for t in tris}

    got = set()
    for key in session.all_chunk_keys():
        m = session.chunk_mesh(key).get(22)
        if m is not None:
            got |= tri_set(m)
    lm = LabelMap(data=session.grid, affine=session.affine,
                  label_table=session.label_table)
    want = tri_set(marching_cubes(lm, 22))
    assert got == want


def test_proximity_thresholds():
    model = make_carve_model()
    session = SimSession(model, SimConfig(warn_mm=3.0, danger_mm=1.0))
    cord_vox = np.argwhere(session.grid == 200).mean(axis=0)
    at_cord = session.voxel_to_world(cord_vox)[0]
    assert session.proximity(at_cord).level == "danger"
    far = session.voxel_to_world([[2.0, 2.0, 2.0]])[0]
    d = session.proximity(far)
    assert d.level in ("none", "warn")
    outside = session.proximity([500.0, 0.0, 0.0])
    assert outside.level == "none" and np.isinf(outside.distance_mm)


def test_ledger_tracks_removed_volume(session):
    tip = session.voxel_to_world([[16, 16, 3]])[0]
    res = session.apply_carve(_burr(0, tip, r=4.0))
    rep = session.decompression_report()
    for label, count in res.removed.items():
        name = session.label_table[label]
        assert rep["removed_mm3"][name] == count * 1.0
    assert rep["carve_count"] == 1


def test_session_requires_protected_structure():
    data = np.zeros((8, 8, 8), np.uint16)
    data[2:4] = 22
    lm = LabelMap(data=data, affine=np.eye(4), label_table={22: "L3"})
    with pytest.raises(SimError, match="protected"):
        SimSession(lm)


def test_isolate_round_trip(session):
    before = dict(session._visibility)
    session.isolate_spine(True)
    session.isolate_spine(False)
    assert session._visibility == before


def test_auto_exposure_corridor(session):
    out = session.auto_exposure([22])
    assert out["corridor_mm"]["axis"] == "z"
    assert out["structures"]["L3"] is True
    with pytest.raises(SimError):
        session.auto_exposure([99])
