"""Triangle mesh extraction (marching cubes), Laplacian smoothing, and
glTF 2.0 binary export of the patient model."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from skimage import measure

from .volume import LabelMap, structure_name

log = logging.getLogger(__name__)


class MeshError(Exception):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray       # (n, 3) float32, world mm
    triangles: np.ndarray      # (m, 3) int32, CCW outward
    structure: int = 0
    color: tuple = (0.8, 0.8, 0.8, 1.0)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float32).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0


@dataclass
class ModelScene:
    meshes: dict[int, TriangleMesh] = field(default_factory=dict)
    visibility: dict[int, bool] = field(default_factory=dict)

    def add(self, mesh: TriangleMesh, visible: bool = True):
        self.meshes[mesh.structure] = mesh
        self.visibility[mesh.structure] = visible


# ---------------------------------------------------------------------------
# Palette
# ---------------------------------------------------------------------------

def load_palette() -> dict[str, list[float]]:
    from importlib import resources
    with resources.files("spinesim").joinpath("data/palette.json").open() as f:
        return json.load(f)


def structure_color(label: int) -> tuple:
    pal = load_palette()
    try:
        name = structure_name(label)
    except Exception:
        return tuple(pal.get("default", [0.8, 0.8, 0.8, 1.0]))
    if name in pal:
        return tuple(pal[name])
    if name.startswith("disc_"):
        return tuple(pal.get("disc", pal["default"]))
    if name[0] in "CTL" or name == "sacrum":
        return tuple(pal.get("vertebra", pal["default"]))
    return tuple(pal["default"])


# ---------------------------------------------------------------------------
# Marching cubes
# ---------------------------------------------------------------------------

def _dedupe_degenerate(verts: np.ndarray, faces: np.ndarray):
    """Drop zero-area triangles."""
    if len(faces) == 0:
        return verts, faces
    a = verts[faces[:, 1]] - verts[faces[:, 0]]
    b = verts[faces[:, 2]] - verts[faces[:, 0]]
    area2 = np.linalg.norm(np.cross(a, b), axis=1)
    return verts, faces[area2 > 1e-12]


def mesh_binary_voxels(mask: np.ndarray, origin_voxel=(0.0, 0.0, 0.0),
                       pad: bool = True):
    """Marching cubes of a binary mask at iso 0.5 in voxel coordinates.

    ``pad`` adds virtual zero samples around the mask so border-touching
    masks still close.  Returns (vertices in voxel coords, faces CCW
    outward).
    """
    if not mask.any():
        return np.zeros((0, 3), np.float64), np.zeros((0, 3), np.int64)
    vol = np.pad(mask.astype(np.float32), 1) if pad else mask.astype(np.float32)
    if vol.min() >= 0.5 or vol.max() < 0.5:
        return np.zeros((0, 3), np.float64), np.zeros((0, 3), np.int64)
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.5)
    faces = faces[:, ::-1]          # flip winding so signed volume is positive
    if pad:
        verts = verts - 1.0
    verts = verts + np.asarray(origin_voxel, dtype=np.float64)
    return _dedupe_degenerate(verts, faces)


def marching_cubes(lm: LabelMap, label: int) -> TriangleMesh:
    """Isosurface of one structure label as a world-space triangle mesh."""
    verts, faces = mesh_binary_voxels(lm.data == label)
    if len(verts):
        world = lm.voxel_to_world(verts)
    else:
        world = verts
    return TriangleMesh(vertices=world, triangles=faces, structure=int(label),
                        color=structure_color(int(label)))


def enclosed_volume(mesh: TriangleMesh) -> float:
    """Signed volume by tetrahedra against the origin; positive for CCW
    outward winding."""
    v = mesh.vertices.astype(np.float64)
    t = mesh.triangles
    if len(t) == 0:
        return 0.0
    return float(np.einsum("ij,ij->i", v[t[:, 0]],
                           np.cross(v[t[:, 1]], v[t[:, 2]])).sum() / 6.0)


def edge_counts(triangles: np.ndarray) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for tri in triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            k = (int(min(a, b)), int(max(a, b)))
            counts[k] = counts.get(k, 0) + 1
    return counts


def is_manifold(mesh: TriangleMesh) -> bool:
    return all(c <= 2 for c in edge_counts(mesh.triangles).values())


# ---------------------------------------------------------------------------
# Smoothing
# ---------------------------------------------------------------------------

def smooth(mesh: TriangleMesh, iterations: int = 10, step: float = 0.5) -> TriangleMesh:
    """Uniform-weight Laplacian smoothing; topology unchanged."""
    if iterations == 0 or mesh.empty:
        return TriangleMesh(vertices=mesh.vertices.copy(),
                            triangles=mesh.triangles.copy(),
                            structure=mesh.structure, color=mesh.color)
    if not is_manifold(mesh):
        log.warning("non-manifold mesh for structure %s: smoothing skipped",
                    mesh.structure)
        return mesh
    n = len(mesh.vertices)
    tri = mesh.triangles
    # neighbor sums via sparse-style accumulation
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    i = np.concatenate([edges[:, 0], edges[:, 1]])
    j = np.concatenate([edges[:, 1], edges[:, 0]])
    deg = np.bincount(i, minlength=n).astype(np.float64)
    has_nb = deg > 0
    v = mesh.vertices.astype(np.float64)
    for _ in range(iterations):
        acc = np.zeros_like(v)
        np.add.at(acc, i, v[j])
        mean_nb = np.where(has_nb[:, None], acc / np.maximum(deg, 1)[:, None], v)
        v = v + step * (mean_nb - v)
    return TriangleMesh(vertices=v, triangles=tri.copy(),
                        structure=mesh.structure, color=mesh.color)


# ---------------------------------------------------------------------------
# Scene construction
# ---------------------------------------------------------------------------

def build_scene(lm: LabelMap, smooth_iterations: int = 10,
                smooth_step: float = 0.5) -> ModelScene:
    """One smoothed mesh per structure label present in the map."""
    scene = ModelScene()
    for label in lm.labels_present():
        m = marching_cubes(lm, label)
        if not m.empty:
            m = smooth(m, iterations=smooth_iterations, step=smooth_step)
        scene.add(m)
    return scene


# ---------------------------------------------------------------------------
# glTF 2.0 binary export
# ---------------------------------------------------------------------------

def _pad_to(data: bytes, align: int, pad: bytes) -> bytes:
    rem = len(data) % align
    return data if rem == 0 else data + pad * (align - rem)


def export_gltf(scene: ModelScene, path: str) -> None:
    """Write a deterministic glTF 2.0 binary (.glb): one named node per
    structure, positions in mm, per-structure base color."""
    labels = [l for l in sorted(scene.meshes) if not scene.meshes[l].empty]
    if not labels:
        raise MeshError("nothing to export: scene has no geometry")
    bin_parts: list[bytes] = []
    buffer_views = []
    accessors = []
    meshes = []
    materials = []
    nodes = []
    offset = 0

    def add_view(data: bytes, target: int) -> int:
        nonlocal offset
        data = _pad_to(data, 4, b"\x00")
        buffer_views.append({"buffer": 0, "byteOffset": offset,
                             "byteLength": len(data), "target": target})
        bin_parts.append(data)
        offset += len(data)
        return len(buffer_views) - 1

    for mi, label in enumerate(labels):
        m = scene.meshes[label]
        pos = np.ascontiguousarray(m.vertices, dtype=np.float32)
        idx = np.ascontiguousarray(m.triangles, dtype=np.uint32).ravel()
        pv = add_view(pos.tobytes(), 34962)
        iv = add_view(idx.tobytes(), 34963)
        accessors.append({"bufferView": pv, "componentType": 5126,
                          "count": len(pos), "type": "VEC3",
                          "min": [float(x) for x in pos.min(axis=0)],
                          "max": [float(x) for x in pos.max(axis=0)]})
        accessors.append({"bufferView": iv, "componentType": 5125,
                          "count": len(idx), "type": "SCALAR"})
        name = structure_name(label)
        materials.append({"name": name,
                          "pbrMetallicRoughness": {
                              "baseColorFactor": [float(c) for c in m.color],
                              "metallicFactor": 0.0, "roughnessFactor": 0.9}})
        meshes.append({"name": name,
                       "primitives": [{"attributes": {"POSITION": 2 * mi},
                                       "indices": 2 * mi + 1,
                                       "material": mi}]})
        nodes.append({"name": name, "mesh": mi})

    binary = b"".join(bin_parts)
    doc = {
        "asset": {"version": "2.0", "generator": "spinesim"},
        "scene": 0,
        "scenes": [{"nodes": list(range(len(nodes)))}],
        "nodes": nodes,
        "meshes": meshes,
        "materials": materials,
        "accessors": accessors,
        "bufferViews": buffer_views,
        "buffers": [{"byteLength": len(binary)}],
    }
    js = _pad_to(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode(), 4, b" ")
    total = 12 + 8 + len(js) + 8 + len(binary)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", b"glTF", 2, total))
        f.write(struct.pack("<I4s", len(js), b"JSON"))
        f.write(js)
        f.write(struct.pack("<I4s", len(binary), b"BIN\x00"))
        f.write(binary)


def read_glb(path: str) -> dict[str, dict]:
    """Minimal GLB reader for round-trip checks: node name -> arrays."""
    with open(path, "rb") as f:
        raw = f.read()
    magic, version, _ = struct.unpack_from("<4sII", raw, 0)
    if magic != b"glTF" or version != 2:
        raise MeshError("not a glTF 2.0 binary")
    jlen, jtype = struct.unpack_from("<I4s", raw, 12)
    doc = json.loads(raw[20:20 + jlen])
    boff = 20 + jlen
    blen, btype = struct.unpack_from("<I4s", raw, boff)
    binary = raw[boff + 8: boff + 8 + blen]

    def read_accessor(ai):
        acc = doc["accessors"][ai]
        bv = doc["bufferViews"][acc["bufferView"]]
        start = bv.get("byteOffset", 0)
        buf = binary[start:start + bv["byteLength"]]
        dt = {5126: np.float32, 5125: np.uint32}[acc["componentType"]]
        n = acc["count"] * (3 if acc["type"] == "VEC3" else 1)
        arr = np.frombuffer(buf, dtype=dt, count=n)
        return arr.reshape(-1, 3) if acc["type"] == "VEC3" else arr

    out = {}
    for node in doc["nodes"]:
        mesh = doc["meshes"][node["mesh"]]
        prim = mesh["primitives"][0]
        out[node["name"]] = {
            "positions": read_accessor(prim["attributes"]["POSITION"]),
            "indices": read_accessor(prim["indices"]),
            "color": doc["materials"][prim["material"]]
                     ["pbrMetallicRoughness"]["baseColorFactor"],
        }
    return out
