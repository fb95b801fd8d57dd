"""Headless rehearsal engine: virtual tools carve the working label grid,
chunked meshes update incrementally, and a precomputed distance field to
the protected neural structures drives the proximity alarm.

The distance field is never recomputed after carving: protected voxels
cannot be removed, so the alarm geometry stays valid for the whole session.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .meshing import TriangleMesh, mesh_binary_voxels, structure_color
from .volume import LabelMap, structure_name

CHUNK = 16

DEFAULT_PROTECTED = frozenset({200, 201, 202})   # spinal_cord, csf, nerve_roots


class SimError(Exception):
    pass


@dataclass(frozen=True)
class Tool:
    kind: str                        # burr | kerrison | woodson | rongeur
    radius_mm: float = 3.0           # burr sphere radius
    bite_mm: tuple = (4.0, 6.0, 3.0)  # kerrison footprint (w, d, h)

    CARVING = ("burr", "kerrison")
    KINDS = ("burr", "kerrison", "woodson", "rongeur")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise SimError(f"unknown tool {self.kind!r}")
        if self.radius_mm <= 0 or any(x <= 0 for x in self.bite_mm):
            raise SimError("tool dimensions must be positive")

    @property
    def carving(self) -> bool:
        return self.kind in self.CARVING


@dataclass(frozen=True)
class CarveCommand:
    seq: int
    tool: Tool
    tip: np.ndarray                  # world mm
    direction: np.ndarray = (0.0, 0.0, 1.0)
    active: bool = True

    def __post_init__(self):
        object.__setattr__(self, "tip", np.asarray(self.tip, dtype=np.float64).reshape(3))
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-6:
            if n == 0:
                raise SimError("direction must be a unit vector")
            d = d / n
        object.__setattr__(self, "direction", d)

    @classmethod
    def from_json(cls, doc: dict) -> "CarveCommand":
        t = doc.get("tool", {})
        tool = Tool(kind=t.get("kind", "burr"),
                    radius_mm=float(t.get("radius_mm", 3.0)),
                    bite_mm=tuple(t.get("bite_mm", (4.0, 6.0, 3.0))))
        return cls(seq=int(doc["seq"]), tool=tool, tip=doc["tip_mm"],
                   direction=doc.get("direction", (0.0, 0.0, 1.0)),
                   active=bool(doc.get("active", True)))

    def to_json(self) -> dict:
        return {"seq": self.seq,
                "tool": {"kind": self.tool.kind, "radius_mm": self.tool.radius_mm,
                         "bite_mm": list(self.tool.bite_mm)},
                "tip_mm": self.tip.tolist(),
                "direction": self.direction.tolist(),
                "active": self.active}


@dataclass(frozen=True)
class AlarmState:
    level: str                       # none | warn | danger
    distance_mm: float
    structure: str | None = None

    def to_json(self) -> dict:
        return {"level": self.level,
                "distance_mm": None if math.isinf(self.distance_mm) else self.distance_mm,
                "structure": self.structure}


@dataclass
class CarveResult:
    seq: int
    removed: dict[int, int]          # label -> voxels removed
    dirty_chunks: list[tuple[int, int, int]]
    alarm: AlarmState
    violation: bool
    applied: bool = True


@dataclass(frozen=True)
class SimConfig:
    protected: frozenset[int] = DEFAULT_PROTECTED
    warn_mm: float = 3.0
    danger_mm: float = 1.0


class SimSession:
    """Single-writer rehearsal state over one merged patient model."""

    def __init__(self, model: LabelMap, cfg: SimConfig = SimConfig()):
        present = set(model.labels_present())
        protected = set(cfg.protected) & present
        carvable = present - set(cfg.protected)
        if not protected:
            raise SimError("model contains no protected structures; "
                           "the proximity alarm cannot function")
        if not carvable:
            raise SimError("model contains no carvable structures")
        self.cfg = cfg
        self.grid = model.data.copy()
        self.initial_counts = {l: int((self.grid == l).sum()) for l in present}
        self.affine = np.asarray(model.affine, dtype=np.float64)
        self.inv_affine = np.linalg.inv(self.affine)
        self.spacing = model.spacing
        self.label_table = dict(model.label_table)
        self.protected = frozenset(protected)
        pm = np.isin(self.grid, list(protected))
        self.protected_mask = pm
        dist, nearest = ndimage.distance_transform_edt(
            ~pm, sampling=self.spacing, return_indices=True)
        self.sdf = dist.astype(np.float64)
        self.nearest_label = self.grid[tuple(nearest)]
        dims = self.grid.shape
        self.chunk_dims = tuple(-(-d // CHUNK) for d in dims)
        self._mesh_cache: dict[tuple, dict[int, TriangleMesh]] = {}
        self.undo_stack: list[dict] = []
        self.ledger: dict[int, int] = {l: 0 for l in present}
        self.violations = 0
        self.carve_count = 0
        self._last_seq = None
        self._visibility: dict[str, bool] = {structure_name(l): True for l in present}
        self._vis_before_isolate: dict[str, bool] | None = None

    # -- geometry helpers ---------------------------------------------------

    def world_to_voxel(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return pts @ self.inv_affine[:3, :3].T + self.inv_affine[:3, 3]

    def voxel_to_world(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return pts @ self.affine[:3, :3].T + self.affine[:3, 3]

    # -- footprints ----------------------------------------------------------

    def _footprint_indices(self, cmd: CarveCommand) -> np.ndarray:
        """Voxel indices whose centers lie inside the tool footprint."""
        tool = cmd.tool
        if tool.kind == "burr":
            half = np.full(3, tool.radius_mm)
        else:
            half = np.full(3, float(np.linalg.norm(tool.bite_mm)) / 2 + 1e-9)
        lo_w, hi_w = cmd.tip - half, cmd.tip + half
        # voxel bbox: project the world bbox corners through the inverse affine
        corners = np.array([[lo_w[i] if b & (1 << i) else hi_w[i] for i in range(3)]
                            for b in range(8)])
        vox = self.world_to_voxel(corners)
        lo = np.maximum(np.floor(vox.min(axis=0)).astype(int) - 1, 0)
        hi = np.minimum(np.ceil(vox.max(axis=0)).astype(int) + 1,
                        np.array(self.grid.shape) - 1)
        if np.any(lo > hi):
            return np.zeros((0, 3), dtype=np.int64)
        ranges = [np.arange(lo[a], hi[a] + 1) for a in range(3)]
        idx = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, 3)
        centers = self.voxel_to_world(idx.astype(np.float64))
        rel = centers - cmd.tip
        if tool.kind == "burr":
            inside = (rel * rel).sum(axis=1) <= tool.radius_mm ** 2
        else:
            ex, ey, ez = kerrison_frame(cmd.direction)
            w, d, h = tool.bite_mm
            u = rel @ ex
            vv = rel @ ey
            t = rel @ ez
            inside = (np.abs(u) <= w / 2) & (np.abs(vv) <= h / 2) & (t >= 0) & (t <= d)
        return idx[inside]

    # -- chunk meshes ---------------------------------------------------------

    def _chunks_of(self, idx: np.ndarray) -> set[tuple[int, int, int]]:
        if len(idx) == 0:
            return set()
        # a voxel's isosurface spills into cells sharing it: pad by 1
        keys = set()
        for delta in np.array(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1],
                                          indexing="ij")).reshape(3, -1).T:
            nb = idx + delta
            ok = np.all((nb >= 0) & (nb < np.array(self.grid.shape)), axis=1)
            for c in {tuple(k) for k in nb[ok] // CHUNK}:
                keys.add(c)
        return keys

    def chunk_mesh(self, key: tuple[int, int, int]) -> dict[int, TriangleMesh]:
        """Per-structure meshes of one 16^3 chunk, cached until dirtied.

        Chunks partition the marching-cubes cell grid of the zero-padded
        model, so the union of chunk meshes equals whole-model meshing.
        """
        if key in self._mesh_cache:
            return self._mesh_cache[key]
        meshes = self._mesh_chunk(key)
        self._mesh_cache[key] = meshes
        return meshes

    def _mesh_chunk(self, key) -> dict[int, TriangleMesh]:
        dims = self.grid.shape
        # work in padded-sample coordinates: padded grid has dims+2 samples
        x0 = np.array(key) * CHUNK                      # first owned cell
        x1 = np.minimum(x0 + CHUNK, np.array(dims) + 1)  # one past last owned cell
        sub = np.zeros(tuple(x1 - x0 + 1), dtype=self.grid.dtype)
        src_lo = np.maximum(x0 - 1, 0)
        src_hi = np.minimum(x1, np.array(dims))
        dst_lo = src_lo - (x0 - 1)
        dst_hi = dst_lo + (src_hi - src_lo)
        sub[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
            self.grid[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
        out: dict[int, TriangleMesh] = {}
        for label in np.unique(sub):
            if label == 0:
                continue
            verts, faces = mesh_binary_voxels(sub == label, pad=False)
            if len(faces) == 0:
                continue
            verts = verts + (x0 - 1)     # back to voxel coordinates
            world = self.voxel_to_world(verts)
            out[int(label)] = TriangleMesh(vertices=world, triangles=faces,
                                           structure=int(label),
                                           color=structure_color(int(label)))
        return out

    def all_chunk_keys(self):
        cx, cy, cz = self.chunk_dims
        # padded sample grid adds one cell layer on the high side
        dims = np.array(self.grid.shape)
        n = tuple(int(-(-(d + 1) // CHUNK)) for d in dims)
        for i in range(n[0]):
            for j in range(n[1]):
                for k in range(n[2]):
                    yield (i, j, k)

    # -- alarm -----------------------------------------------------------------

    def proximity(self, tip_world) -> AlarmState:
        tip = np.asarray(tip_world, dtype=np.float64).reshape(3)
        vox = self.world_to_voxel(tip)[0]
        hi = np.array(self.grid.shape) - 1
        if np.any(vox < -0.5) or np.any(vox > hi + 0.5):
            return AlarmState(level="none", distance_mm=float("inf"))
        from types import SimpleNamespace

        from .volume import sample as vsample
        d = float(vsample(SimpleNamespace(data=self.sdf), vox[None],
                          mode="trilinear")[0])
        nearest_idx = np.clip(np.round(vox).astype(int), 0, hi)
        label = int(self.nearest_label[tuple(nearest_idx)])
        name = self.label_table.get(label) or structure_name(label)
        if d <= self.cfg.danger_mm:
            level = "danger"
        elif d <= self.cfg.warn_mm:
            level = "warn"
        else:
            level = "none"
        return AlarmState(level=level, distance_mm=d, structure=name)

    # -- carving ----------------------------------------------------------------

    def apply_carve(self, cmd: CarveCommand) -> CarveResult:
        if self._last_seq is not None and cmd.seq <= self._last_seq:
            raise SimError(f"seq {cmd.seq} not increasing (last {self._last_seq})")
        self._last_seq = cmd.seq
        alarm = self.proximity(cmd.tip)
        if not cmd.active or not cmd.tool.carving:
            return CarveResult(seq=cmd.seq, removed={}, dirty_chunks=[],
                               alarm=alarm, violation=False, applied=False)
        idx = self._footprint_indices(cmd)
        violation = False
        removed: dict[int, int] = {}
        hit = np.zeros(len(idx), dtype=bool)
        if len(idx):
            labels = self.grid[idx[:, 0], idx[:, 1], idx[:, 2]]
            prot = self.protected_mask[idx[:, 0], idx[:, 1], idx[:, 2]]
            violation = bool((prot & (labels != 0)).any())
            hit = (labels != 0) & ~prot
        if hit.any():
            hidx = idx[hit]
            old = self.grid[hidx[:, 0], hidx[:, 1], hidx[:, 2]].copy()
            for l, c in zip(*np.unique(old, return_counts=True)):
                removed[int(l)] = int(c)
                self.ledger[int(l)] = self.ledger.get(int(l), 0) + int(c)
            self.grid[hidx[:, 0], hidx[:, 1], hidx[:, 2]] = 0
            dirty = self._chunks_of(hidx)
            for k in dirty:
                self._mesh_cache.pop(k, None)
            self.undo_stack.append({"seq": cmd.seq, "indices": hidx,
                                    "old": old, "removed": removed})
        else:
            dirty = set()
        self.carve_count += 1
        if violation:
            self.violations += 1
        return CarveResult(seq=cmd.seq, removed=removed,
                           dirty_chunks=sorted(dirty), alarm=alarm,
                           violation=violation)

    def undo(self) -> list[tuple[int, int, int]]:
        """Reverse the last carve diff; returns the re-dirtied chunks."""
        if not self.undo_stack:
            return []
        diff = self.undo_stack.pop()
        idx = diff["indices"]
        self.grid[idx[:, 0], idx[:, 1], idx[:, 2]] = diff["old"]
        for l, c in diff["removed"].items():
            self.ledger[l] -= c
        dirty = self._chunks_of(idx)
        for k in dirty:
            self._mesh_cache.pop(k, None)
        return sorted(dirty)

    # -- visibility ---------------------------------------------------------------

    def auto_exposure(self, levels: list[int]) -> dict:
        """Axial corridor over the selected vertebrae plus a 10 mm margin;
        structures with no voxels inside it are hidden (overridable)."""
        if not levels:
            raise SimError("no levels selected")
        present = set(np.unique(self.grid).tolist())
        missing = [l for l in levels if l not in present]
        if missing:
            raise SimError(f"levels not in model: {missing}")
        # axial = world axis most aligned with the voxel axis of largest
        # anatomical span; use world z by convention
        zmin, zmax = np.inf, -np.inf
        for l in levels:
            idx = np.argwhere(self.grid == l)
            world = self.voxel_to_world(idx.astype(np.float64))
            zmin = min(zmin, world[:, 2].min())
            zmax = max(zmax, world[:, 2].max())
        zmin -= 10.0
        zmax += 10.0
        vis = {}
        for l in sorted(present - {0}):
            idx = np.argwhere(self.grid == l)
            world = self.voxel_to_world(idx.astype(np.float64))
            inside = (world[:, 2] >= zmin) & (world[:, 2] <= zmax)
            name = self.label_table.get(int(l)) or structure_name(int(l))
            vis[name] = bool(inside.any())
        self._visibility = vis
        return {"corridor_mm": {"axis": "z", "min": float(zmin), "max": float(zmax)},
                "structures": dict(vis)}

    def isolate_spine(self, on: bool) -> dict:
        """Show only canonical spine structures; reversible toggle."""
        if on:
            if self._vis_before_isolate is None:
                self._vis_before_isolate = dict(self._visibility)
            known = set()
            for l in set(np.unique(self.grid).tolist()) - {0}:
                try:
                    known.add(structure_name(int(l)))
                except Exception:
                    pass
            self._visibility = {n: (n in known) for n in self._visibility}
        else:
            if self._vis_before_isolate is not None:
                self._visibility = self._vis_before_isolate
                self._vis_before_isolate = None
        return {"structures": dict(self._visibility)}

    # -- accounting -------------------------------------------------------------

    def decompression_report(self) -> dict:
        voxel_mm3 = float(np.prod(self.spacing))
        removed = {}
        for l, c in sorted(self.ledger.items()):
            if c:
                name = self.label_table.get(l) or structure_name(l)
                removed[name] = c * voxel_mm3
        return {"removed_mm3": removed,
                "removed_voxels": {str(l): c for l, c in sorted(self.ledger.items()) if c},
                "violation_count": self.violations,
                "carve_count": self.carve_count}

    def grid_checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.grid).tobytes()).hexdigest()


def kerrison_frame(direction: np.ndarray):
    """Deterministic orthonormal frame: ez along the bite direction."""
    ez = direction / np.linalg.norm(direction)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(ez @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    ex = np.cross(ref, ez)
    ex /= np.linalg.norm(ex)
    ey = np.cross(ez, ex)
    return ex, ey, ez


def create_session(model: LabelMap, cfg: SimConfig = SimConfig()) -> SimSession:
    return SimSession(model, cfg)


def load_carve_script(path: str) -> list[CarveCommand]:
    with open(path) as f:
        doc = json.load(f)
    return [CarveCommand.from_json(item) for item in doc]


def replay_script(session: SimSession, commands) -> dict:
    """Run a carve script headlessly; returns the final accounting."""
    for cmd in commands:
        session.apply_carve(cmd)
    rep = session.decompression_report()
    rep["grid_sha256"] = session.grid_checksum()
    return rep
