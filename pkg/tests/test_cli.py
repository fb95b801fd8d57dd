import json
import os
import subprocess
import sys

import numpy as np
import pytest

from spinesim.volume import LabelMap, save_volume

from conftest import _cli, make_carve_model


def test_usage_error_exit_code():
    r = _cli(["fuse"])                       # missing required options
    assert r.returncode == 1


def test_unknown_subcommand_exit_code():
    r = _cli(["no-such-command"])
    assert r.returncode == 1


def test_data_error_exit_code(tmp_path):
    bad = tmp_path / "bad.nii.gz"
    bad.write_bytes(b"not a nifti")
    r = _cli(["mesh", "--labels", str(bad), "--out", str(tmp_path / "o.glb")])
    assert r.returncode == 2
    assert "data error" in r.stderr


def test_help_exits_zero():
    r = _cli(["--help"])
    assert r.returncode == 0
    for sub in ("fuse", "register", "mesh", "evaluate", "pipeline",
                "carve-replay", "phantom", "serve"):
        assert sub in r.stdout


def test_phantom_and_fuse_and_mesh(tmp_path):
    case = tmp_path / "case"
    r = _cli(["phantom", "--out-dir", str(case), "--size", "24", "--json"])
    assert r.returncode == 0
    doc = json.loads(r.stdout)
    assert doc["initial_landmark_error_mm"] > 0

    fused = tmp_path / "fused.nii.gz"
    r = _cli(["fuse", "--primary", str(case / "ct_seg.nii.gz"),
              "--secondary", str(case / "ct_seg_secondary.nii.gz"),
              "--out", str(fused), "--json"])
    assert r.returncode == 0
    assert 26 in json.loads(r.stdout)["labels"]

    glb = tmp_path / "model.glb"
    r = _cli(["mesh", "--labels", str(fused), "--out", str(glb), "--json"])
    assert r.returncode == 0
    assert glb.read_bytes()[:4] == b"glTF"


def test_carve_replay_json(tmp_path):
    model = make_carve_model()
    mp = tmp_path / "model.nii.gz"
    save_volume(model, str(mp))
    script = [{"seq": 0, "tool": {"kind": "burr", "radius_mm": 3.0},
               "tip_mm": [16.0, 16.0, 3.0]}]
    sp = tmp_path / "script.json"
    sp.write_text(json.dumps(script))
    r = _cli(["carve-replay", "--model", str(mp), "--script", str(sp),
              "--json"])
    assert r.returncode == 0
    doc = json.loads(r.stdout)
    assert doc["carve_count"] == 1
    assert "grid_sha256" in doc


def test_config_file_defaults_flags_win(tmp_path):
    cfg = tmp_path / "cfg"
    cfg.write_text("size=24\nseed=3\n")
    out1 = tmp_path / "c1"
    r = _cli(["--config", str(cfg), "phantom", "--out-dir", str(out1), "--json"])
    assert r.returncode == 0, r.stderr
    with open(out1 / "phantom.json") as f:
        assert json.load(f)["size"] == 24
    out2 = tmp_path / "c2"
    r = _cli(["--config", str(cfg), "phantom", "--out-dir", str(out2),
              "--size", "16", "--json"])
    assert r.returncode == 0, r.stderr
    with open(out2 / "phantom.json") as f:
        assert json.load(f)["size"] == 16      # explicit flag beats config


def test_data_root_env(tmp_path):
    case = tmp_path / "case"
    r = _cli(["phantom", "--out-dir", "case", "--size", "16"],
             env={**os.environ, "DATA_ROOT": str(tmp_path)})
    assert r.returncode == 0, r.stderr
    assert (case / "ct.nii.gz").exists()
