"""Shared fixtures.

The 64-cube synthetic case pipeline is expensive (a few minutes), so it
runs once per session and is shared by the registration-quality and
timing tests.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from spinesim.volume import LabelMap, Volume


@pytest.fixture(scope="session")
def phantom_case(tmp_path_factory):
    """A small synthetic case object (no disk I/O)."""
    from spinesim.phantom import PhantomCase
    return PhantomCase(size=48, deform_amp=5.0, seed=7)


def _cli(args, **kw):
    return subprocess.run([sys.executable, "-m", "spinesim.cli", *args],
                          capture_output=True, text=True, **kw)


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    """Full 64-cube phantom pipeline via the command-line interface.

    Returns (case_dir, out_dir, wall_seconds, report_doc).
    """
    root = tmp_path_factory.mktemp("e2e")
    case_dir = str(root / "case")
    out_dir = str(root / "out")
    r = _cli(["phantom", "--out-dir", case_dir, "--size", "64"])
    assert r.returncode == 0, r.stderr
    t0 = time.perf_counter()
    r = _cli(["pipeline", "--case-dir", case_dir, "--out-dir", out_dir, "--json"])
    wall = time.perf_counter() - t0
    assert r.returncode == 0, r.stderr
    with open(os.path.join(out_dir, "report.json")) as f:
        report = json.load(f)
    return case_dir, out_dir, wall, report


def make_carve_model(n: int = 32, seed: int = 3) -> LabelMap:
    """A 32-cube model with bone, a disc, and a protected cord column."""
    rng = np.random.default_rng(seed)
    ax = np.arange(n)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    seg = np.zeros((n, n, n), np.uint16)
    c = n / 2
    bone = ((X - c) ** 2 + (Y - c) ** 2 <= (n * 0.32) ** 2) & (Z % 11 < 7)
    seg[bone] = 22                                   # L3
    disc = ((X - c) ** 2 + (Y - c) ** 2 <= (n * 0.25) ** 2) & (Z % 11 >= 7)
    seg[disc & (seg == 0)] = 122                     # disc_L3
    cord = ((X - c) ** 2 + (Y - c - n * 0.1) ** 2 <= (n * 0.08) ** 2)
    seg[cord] = 200                                  # spinal_cord
    table = {22: "L3", 122: "disc_L3", 200: "spinal_cord"}
    return LabelMap(data=seg, affine=np.eye(4), label_table=table)


@pytest.fixture()
def carve_model():
    return make_carve_model()
