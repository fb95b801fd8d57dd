"""Volumes, label maps, geometry and NIfTI-1 I/O.

Everything downstream (fusion, registration, meshing, simulation) works on
the two containers defined here.  Intensities are always float32 internally;
labels are unsigned integers.  Arrays are indexed (x, y, z) with x fastest
on disk, matching the NIfTI layout.
"""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class VolumeError(Exception):
    """Raised for malformed files or geometry violations."""


# ---------------------------------------------------------------------------
# Canonical structure labels
# ---------------------------------------------------------------------------

_VERTEBRAE = (
    [f"C{i}" for i in range(1, 8)]
    + [f"T{i}" for i in range(1, 13)]
    + [f"L{i}" for i in range(1, 6)]
)

STRUCTURE_IDS: dict[str, int] = {}
for _i, _name in enumerate(_VERTEBRAE, start=1):
    STRUCTURE_IDS[_name] = _i
STRUCTURE_IDS["sacrum"] = 26
# disc below vertebra <name> carries label 100 + vertebra id
for _name in _VERTEBRAE:
    STRUCTURE_IDS[f"disc_{_name}"] = 100 + STRUCTURE_IDS[_name]
STRUCTURE_IDS["spinal_cord"] = 200
STRUCTURE_IDS["csf"] = 201
STRUCTURE_IDS["nerve_roots"] = 202
STRUCTURE_IDS["ligamentum_flavum"] = 203

STRUCTURE_NAMES: dict[int, str] = {v: k for k, v in STRUCTURE_IDS.items()}

VERTEBRA_LABELS = frozenset(STRUCTURE_IDS[n] for n in _VERTEBRAE) | {26}
DISC_LABELS = frozenset(100 + STRUCTURE_IDS[n] for n in _VERTEBRAE)
NEURAL_LABELS = frozenset({200, 201, 202})


def structure_id(name: str) -> int:
    try:
        return STRUCTURE_IDS[name]
    except KeyError:
        raise VolumeError(f"unknown structure name: {name!r}") from None


def structure_name(label: int) -> str:
    try:
        return STRUCTURE_NAMES[int(label)]
    except KeyError:
        raise VolumeError(f"unknown structure label: {label}") from None


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------

def _check_geometry(data: np.ndarray, affine: np.ndarray) -> None:
    if data.ndim != 3:
        raise VolumeError(f"expected 3D data, got shape {data.shape}")
    if affine.shape != (4, 4):
        raise VolumeError("index_to_world must be 4x4")
    if abs(np.linalg.det(affine[:3, :3])) <= 1e-12:
        raise VolumeError("index_to_world affine is not invertible")


@dataclass(frozen=True)
class Volume:
    """3D scalar grid with an index-to-world affine in mm."""

    data: np.ndarray          # float32, shape (nx, ny, nz)
    affine: np.ndarray        # 4x4, voxel index -> world mm

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float32))
        object.__setattr__(self, "affine", np.asarray(self.affine, dtype=np.float64))
        _check_geometry(self.data, self.affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def spacing(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    def voxel_to_world(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return pts @ self.affine[:3, :3].T + self.affine[:3, 3]

    def world_to_voxel(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        inv = np.linalg.inv(self.affine)
        return pts @ inv[:3, :3].T + inv[:3, 3]


@dataclass(frozen=True)
class LabelMap:
    """Integer label grid sharing Volume geometry, plus a label table."""

    data: np.ndarray          # unsigned int, shape (nx, ny, nz)
    affine: np.ndarray
    label_table: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        d = np.asarray(self.data)
        if not np.issubdtype(d.dtype, np.integer):
            raise VolumeError("label data must be integer")
        object.__setattr__(self, "data", d.astype(np.uint16, copy=False))
        object.__setattr__(self, "affine", np.asarray(self.affine, dtype=np.float64))
        _check_geometry(self.data, self.affine)
        table = {int(k): str(v) for k, v in self.label_table.items()}
        object.__setattr__(self, "label_table", table)
        present = set(np.unique(self.data).tolist()) - {0}
        missing = present - set(table)
        if missing:
            raise VolumeError(f"labels missing from label_table: {sorted(missing)}")

    dims = Volume.dims
    spacing = Volume.spacing
    voxel_to_world = Volume.voxel_to_world
    world_to_voxel = Volume.world_to_voxel

    def labels_present(self) -> list[int]:
        return sorted(set(np.unique(self.data).tolist()) - {0})


def same_geometry(a, b, tol: float = 1e-5) -> bool:
    return a.dims == b.dims and np.allclose(a.affine, b.affine, atol=tol)


def default_label_table(data: np.ndarray) -> dict[int, str]:
    """Canonical names for all nonzero labels in ``data``."""
    return {int(l): structure_name(int(l))
            for l in np.unique(data) if l != 0}


# ---------------------------------------------------------------------------
# NIfTI-1 codec
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {
    2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32,
    64: np.float64, 256: np.int8, 512: np.uint16, 768: np.uint32,
}
_DTYPE_CODES = {np.dtype(np.float32): (16, 32), np.dtype(np.uint16): (512, 16)}


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _read_header(raw: bytes):
    if len(raw) < 352:
        raise VolumeError("corrupt header: file truncated")
    (size,) = struct.unpack("<i", raw[:4])
    bo = "<"
    if size != 348:
        (size,) = struct.unpack(">i", raw[:4])
        bo = ">"
        if size != 348:
            raise VolumeError("corrupt header: bad sizeof_hdr")
    if raw[344:347] not in (b"n+1", b"ni1"):
        raise VolumeError("corrupt header: bad magic")
    dim = struct.unpack(bo + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(bo + "2h", raw[70:74])
    pixdim = struct.unpack(bo + "8f", raw[76:108])
    (vox_offset,) = struct.unpack(bo + "f", raw[108:112])
    scl_slope, scl_inter = struct.unpack(bo + "2f", raw[112:120])
    qform, sform = struct.unpack(bo + "2h", raw[252:256])
    quat = struct.unpack(bo + "6f", raw[256:280])
    srow = np.array(struct.unpack(bo + "12f", raw[280:328])).reshape(3, 4)
    return dict(bo=bo, dim=dim, datatype=datatype, bitpix=bitpix,
                pixdim=pixdim, vox_offset=int(vox_offset),
                scl_slope=scl_slope, scl_inter=scl_inter,
                qform=qform, sform=sform, quat=quat, srow=srow)


def _header_affine(h) -> np.ndarray:
    aff = np.eye(4)
    if h["sform"] > 0:
        aff[:3, :] = h["srow"]
    elif h["qform"] > 0:
        b, c, d, ox, oy, oz = h["quat"]
        a = np.sqrt(max(0.0, 1.0 - b * b - c * c - d * d))
        R = np.array([
            [a*a+b*b-c*c-d*d, 2*(b*c-a*d), 2*(b*d+a*c)],
            [2*(b*c+a*d), a*a+c*c-b*b-d*d, 2*(c*d-a*b)],
            [2*(b*d-a*c), 2*(c*d+a*b), a*a+d*d-b*b-c*c],
        ])
        qfac = -1.0 if h["pixdim"][0] < 0 else 1.0
        sp = np.array([h["pixdim"][1], h["pixdim"][2], h["pixdim"][3] * qfac])
        aff[:3, :3] = R * sp
        aff[:3, 3] = (ox, oy, oz)
    else:
        aff[:3, :3] = np.diag(h["pixdim"][1:4])
    return aff


def _load_array(path: str):
    raw = _read_bytes(path)
    h = _read_header(raw)
    if h["dim"][0] not in (2, 3) or h["dim"][0] == 0:
        if h["dim"][0] > 3 and any(d > 1 for d in h["dim"][4:4 + h["dim"][0] - 3]):
            raise VolumeError("4D volumes are not supported")
    dims = tuple(max(1, d) for d in h["dim"][1:4])
    try:
        dt = np.dtype(_NIFTI_DTYPES[h["datatype"]]).newbyteorder(h["bo"])
    except KeyError:
        raise VolumeError(f"unsupported NIfTI datatype {h['datatype']}") from None
    n = int(np.prod(dims))
    start = h["vox_offset"] or 352
    buf = raw[start:start + n * dt.itemsize]
    if len(buf) < n * dt.itemsize:
        raise VolumeError("corrupt header: data shorter than header promises")
    arr = np.frombuffer(buf, dtype=dt).reshape(dims, order="F")
    affine = _header_affine(h)
    _check_geometry(np.empty(dims, np.uint8), affine)
    slope = h["scl_slope"] if h["scl_slope"] not in (0.0,) else 1.0
    return arr, affine, slope, h["scl_inter"]


def load_volume(path: str) -> Volume:
    """Read a NIfTI-1 (.nii / .nii.gz) file as a float32 Volume."""
    arr, affine, slope, inter = _load_array(path)
    data = arr.astype(np.float32)
    if slope != 1.0 or inter != 0.0:
        data = data * np.float32(slope) + np.float32(inter)
    return Volume(data=data, affine=affine)


def load_labelmap(path: str, sidecar: str | None = None) -> LabelMap:
    """Read a NIfTI label map; label table from sidecar JSON if present.

    Sidecar defaults to ``<path minus .nii/.nii.gz>.labels.json``; when no
    sidecar exists the canonical structure table is assumed.
    """
    arr, affine, _, _ = _load_array(path)
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.allclose(arr, np.round(arr)):
            raise VolumeError(f"{path}: non-integer data in label map")
    data = np.round(np.asarray(arr)).astype(np.uint16)
    if sidecar is None:
        base = path
        for suf in (".nii.gz", ".nii"):
            if base.endswith(suf):
                base = base[: -len(suf)]
                break
        sidecar = base + ".labels.json"
    if os.path.exists(sidecar):
        with open(sidecar) as f:
            doc = json.load(f)
        table = {int(k): str(v) for k, v in doc.get("labels", {}).items()}
    else:
        table = default_label_table(data)
    return LabelMap(data=data, affine=affine, label_table=table)


def save_volume(v: Volume | LabelMap, path: str) -> None:
    """Write a Volume/LabelMap as NIfTI-1 (+ sidecar JSON for label maps)."""
    is_labels = isinstance(v, LabelMap)
    data = v.data.astype(np.uint16 if is_labels else np.float32, copy=False)
    code, bitpix = _DTYPE_CODES[data.dtype]
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, bitpix)
    sp = np.linalg.norm(np.asarray(v.affine)[:3, :3], axis=0)
    struct.pack_into("<8f", hdr, 76, 1.0, *sp, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<2h", hdr, 252, 0, 1)   # sform only
    srow = np.asarray(v.affine, dtype=np.float32)[:3, :]
    struct.pack_into("<12f", hdr, 280, *srow.ravel())
    hdr[344:348] = b"n+1\x00"
    payload = bytes(hdr) + data.tobytes(order="F")
    if path.endswith(".gz"):
        # fixed mtime so identical inputs give identical bytes
        payload = gzip.compress(payload, mtime=0)
    try:
        with open(path, "wb") as f:
            f.write(payload)
    except OSError as e:
        raise VolumeError(f"cannot write {path}: {e}") from e
    if is_labels:
        base = path
        for suf in (".nii.gz", ".nii"):
            if base.endswith(suf):
                base = base[: -len(suf)]
                break
        with open(base + ".labels.json", "w") as f:
            json.dump({"labels": {str(k): n for k, n in sorted(v.label_table.items())}}, f, indent=1)


# ---------------------------------------------------------------------------
# Sampling / smoothing / resampling
# ---------------------------------------------------------------------------

def sample(v: Volume | LabelMap, points, mode: str = "trilinear") -> np.ndarray:
    """Sample at continuous voxel coordinates; out of bounds clamps to edge.

    ``nearest`` rounds half away from zero.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    data = v.data
    hi = np.array(data.shape) - 1
    if mode == "nearest":
        idx = np.trunc(pts + np.copysign(0.5, pts)).astype(np.int64)
        idx = np.clip(idx, 0, hi)
        return data[idx[:, 0], idx[:, 1], idx[:, 2]]
    if mode != "trilinear":
        raise ValueError(f"unknown sampling mode {mode!r}")
    p = np.clip(pts, 0, hi)
    i0 = np.floor(p).astype(np.int64)
    i0 = np.minimum(i0, np.maximum(hi - 1, 0))
    f = p - i0
    i1 = np.minimum(i0 + 1, hi)
    out = np.zeros(len(p))
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1 - f[:, 0]
        ix = i1[:, 0] if dx else i0[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1 - f[:, 1]
            iy = i1[:, 1] if dy else i0[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1 - f[:, 2]
                iz = i1[:, 2] if dz else i0[:, 2]
                out += wx * wy * wz * data[ix, iy, iz]
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Discrete Gaussian, radius ceil(3*sigma), normalized to sum 1."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return np.array([1.0])
    r = int(np.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(v: Volume, sigma: float) -> Volume:
    """Separable Gaussian with clamp-to-edge boundaries; sigma=0 is identity."""
    return Volume(data=smooth_array(v.data, sigma), affine=v.affine)


def smooth_array(a: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    out = np.asarray(a, dtype=np.float64)
    if len(k) > 1:
        for axis in range(3):
            out = ndimage.correlate1d(out, k, axis=axis, mode="nearest")
    return out.astype(np.float32)


def resample_into(src: Volume | LabelMap, target_affine, target_dims,
                  mapping=None, mode: str | None = None):
    """Resample ``src`` onto a target grid.

    ``mapping`` maps target-space world mm points to source-space world mm
    points (identity when None).  Labels are always nearest-neighbor and
    fill 0 outside the source domain; intensities are trilinear with edge
    clamping unless ``mode`` overrides.
    """
    target_affine = np.asarray(target_affine, dtype=np.float64)
    _check_geometry(np.empty(target_dims, np.uint8), target_affine)
    is_labels = isinstance(src, LabelMap)
    if mode is None:
        mode = "nearest" if is_labels else "trilinear"
    if is_labels:
        mode = "nearest"
    nx, ny, nz = target_dims
    idx = np.indices(target_dims, dtype=np.float64).reshape(3, -1).T
    world = idx @ target_affine[:3, :3].T + target_affine[:3, 3]
    if mapping is not None:
        world = np.atleast_2d(np.asarray(mapping(world), dtype=np.float64))
    vox = src.world_to_voxel(world)
    vals = sample(src, vox, mode=mode)
    if is_labels:
        hi = np.array(src.data.shape) - 1
        inside = np.all((vox >= -0.5) & (vox <= hi + 0.5), axis=1)
        vals = np.where(inside, vals, 0)
        out = vals.reshape(target_dims).astype(np.uint16)
        return LabelMap(data=out, affine=target_affine, label_table=src.label_table)
    return Volume(data=vals.reshape(target_dims).astype(np.float32), affine=target_affine)
