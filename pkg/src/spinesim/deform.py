"""Deformable refinement of the affine-aligned MRI onto CT.

Moving-image MIND descriptors are computed once and warped each iteration
through a control-grid displacement field (fixed-image voxel units,
trilinearly upsampled).  The objective is mean squared descriptor
difference plus a smoothed-L1 penalty on the field gradient, minimized by
ADAM under the 250-iteration piecewise-decay learning-rate schedule.
"""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .affine import SimilarityTransform
from .volume import Volume, VolumeError, smooth_array, _read_bytes, _read_header, _header_affine

# the 6 axial unit-voxel offsets used for self-similarity patches
MIND_OFFSETS = np.array([
    [1, 0, 0], [-1, 0, 0],
    [0, 1, 0], [0, -1, 0],
    [0, 0, 1], [0, 0, -1],
], dtype=np.int64)


class DeformError(Exception):
    pass


@dataclass(frozen=True)
class MindParams:
    patch_sigma: float = 0.8
    variance_clamp: tuple[float, float] = (1e-3, 1e3)   # relative to mean


@dataclass(frozen=True)
class DescriptorField:
    """6 self-similarity channels per voxel, each in (0, 1]."""

    channels: np.ndarray   # (6, nx, ny, nz) float32
    affine: np.ndarray

    @property
    def dims(self):
        return self.channels.shape[1:]


@dataclass
class DisplacementField:
    """Control-grid displacements in fixed-image voxel units."""

    values: np.ndarray          # (3, cx, cy, cz) float64
    stride: int
    fixed_dims: tuple[int, int, int]
    fixed_affine: np.ndarray

    @classmethod
    def zeros(cls, fixed_dims, fixed_affine, stride: int = 4) -> "DisplacementField":
        cdims = tuple(int((d - 1) // stride) + 1 for d in fixed_dims)
        cdims = tuple(max(2, c) for c in cdims)
        return cls(values=np.zeros((3, *cdims)), stride=stride,
                   fixed_dims=tuple(fixed_dims),
                   fixed_affine=np.asarray(fixed_affine, dtype=np.float64))

    @property
    def control_dims(self):
        return self.values.shape[1:]


@dataclass
class OptimizerState:
    """ADAM accumulators over the control grid."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shape) -> "OptimizerState":
        return cls(m=np.zeros(shape), v=np.zeros(shape))


@dataclass(frozen=True)
class RegConfig:
    iterations: int = 250
    lam: float = 0.02
    stride: int = 4
    mind: MindParams = dc_field(default_factory=MindParams)
    grad_eps: float = 1e-6
    # scale factor on the scheduled learning rate; the schedule's nominal
    # values assume gradient-magnitude steps, while the optimizer takes
    # normalized steps in voxel units
    lr_scale: float = 0.1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


# ---------------------------------------------------------------------------
# MIND descriptors
# ---------------------------------------------------------------------------

def _shift_clamped(a: np.ndarray, off) -> np.ndarray:
    """a evaluated at clamp(x + off), edge-replicated."""
    out = a
    for axis, o in enumerate(off):
        if o == 0:
            continue
        idx = np.clip(np.arange(a.shape[axis]) + o, 0, a.shape[axis] - 1)
        out = np.take(out, idx, axis=axis)
    return out


def mind_descriptors(v: Volume, p: MindParams = MindParams()) -> DescriptorField:
    """Per-voxel self-similarity descriptors over the 6 axial offsets.

    Patch distances are Gaussian-weighted squared differences; the local
    variance estimate is their mean, clamped relative to its image mean.
    Channels are exp(-distance/variance), normalized so the per-voxel max
    is exactly 1.
    """
    data = np.asarray(v.data, dtype=np.float64)
    dp = np.empty((6, *data.shape), dtype=np.float64)
    for i, off in enumerate(MIND_OFFSETS):
        d2 = (data - _shift_clamped(data, off)) ** 2
        dp[i] = smooth_array(d2, p.patch_sigma)
    var = dp.mean(axis=0)
    mean_var = var.mean()
    if mean_var > 0:
        lo, hi = p.variance_clamp
        var = np.clip(var, lo * mean_var, hi * mean_var)
    else:
        var = np.ones_like(var)   # constant image: all distances zero
    ch = np.exp(-dp / var)
    ch /= ch.max(axis=0)
    return DescriptorField(channels=ch.astype(np.float32),
                           affine=np.asarray(v.affine, dtype=np.float64))


def similarity_S(ff: DescriptorField, fm_warped: DescriptorField) -> float:
    """Mean squared channel difference (per voxel-channel component)."""
    if ff.channels.shape != fm_warped.channels.shape:
        raise DeformError("similarity_S: geometry mismatch")
    d = ff.channels.astype(np.float64) - fm_warped.channels.astype(np.float64)
    return float(np.mean(d * d))


# ---------------------------------------------------------------------------
# Regularizer: smoothed mean gradient magnitude of the control field
# ---------------------------------------------------------------------------

def _grad_adjoint(y: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of np.gradient along one axis (unit sample spacing)."""
    n = y.shape[axis]
    y = np.moveaxis(y, axis, 0)
    out = np.zeros_like(y)
    if n == 2:
        s = y[0] + y[1]
        out[1] += s
        out[0] -= s
    else:
        mid = y[1:-1]
        out[2:] += mid / 2
        out[:-2] -= mid / 2
        out[1] += y[0]
        out[0] -= y[0]
        out[-1] += y[-1]
        out[-2] -= y[-1]
    return np.moveaxis(out, 0, axis)


def regularizer_R(D: DisplacementField | np.ndarray, eps: float = 1e-6,
                  with_grad: bool = False):
    """Mean smoothed gradient magnitude of the displacement field.

    Per node: sqrt(sum over 3 components x 3 axes of difference^2 + eps^2)
    minus eps; differences are central in the interior, one-sided at the
    boundary.  Returns (R, dR/dvalues) when with_grad is set.
    """
    vals = D.values if isinstance(D, DisplacementField) else np.asarray(D, dtype=np.float64)
    if min(vals.shape[1:]) < 2:
        raise DeformError("control grid needs >= 2 nodes per axis")
    g = np.stack([np.stack([np.gradient(vals[c], axis=a) for a in range(3)])
                  for c in range(3)])          # (3 comp, 3 axis, grid)
    mag = np.sqrt((g * g).sum(axis=(0, 1)) + eps * eps)
    n_nodes = mag.size
    r = float((mag - eps).mean())
    if not with_grad:
        return r
    w = g / mag[None, None]                    # d(mag)/dg
    grad = np.zeros_like(vals)
    for c in range(3):
        for a in range(3):
            grad[c] += _grad_adjoint(w[c, a], axis=a)
    return r, grad / n_nodes


# ---------------------------------------------------------------------------
# Learning rate schedule and ADAM
# ---------------------------------------------------------------------------

def pwd_learning_rate(s) -> float:
    """Piecewise decay over 250 iterations: flat 15, cosine, then linear."""
    if s < 0 or s > 250:
        raise ValueError(f"iteration index {s} outside [0, 250]")
    if s < 70:
        return 15.0
    if s < 180:
        return 7.0 * np.cos(2.0 * np.pi / 200.0 * (s - 70)) + 8.0
    return -1.209 / 70.0 * (s - 180) + 1.343


def adam_step(state: OptimizerState, grad: np.ndarray, lr: float) -> np.ndarray:
    """One bias-corrected ADAM step; returns the (negative) update."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise DeformError("non-finite gradient in ADAM step")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    mhat = state.m / (1 - state.beta1 ** state.step)
    vhat = state.v / (1 - state.beta2 ** state.step)
    return -lr * mhat / (np.sqrt(vhat) + state.eps)


# ---------------------------------------------------------------------------
# Upsampling (control grid -> voxel grid) and its adjoint
# ---------------------------------------------------------------------------

def _axis_interp(dim: int, cdim: int, stride: int):
    """Base index and fraction of each voxel in control-node coordinates."""
    t = np.clip(np.arange(dim, dtype=np.float64) / stride, 0, cdim - 1)
    i0 = np.minimum(np.floor(t).astype(np.int64), cdim - 2)
    return i0, t - i0


def _interp_along(v: np.ndarray, axis: int, i0, f) -> np.ndarray:
    a = np.take(v, i0, axis=axis)
    b = np.take(v, i0 + 1, axis=axis)
    shape = [1] * v.ndim
    shape[axis] = len(f)
    fw = f.reshape(shape)
    return a * (1 - fw) + b * fw


def _interp_adjoint(g: np.ndarray, axis: int, i0, f, cdim: int) -> np.ndarray:
    shape = list(g.shape)
    shape[axis] = cdim
    out = np.zeros(shape)
    fw = f.reshape([1] * (axis) + [len(f)] + [1] * (g.ndim - axis - 1))
    gm = np.moveaxis(out, axis, 0)
    gsrc = np.moveaxis(g * (1 - fw), axis, 0)
    np.add.at(gm, i0, gsrc)
    gsrc = np.moveaxis(g * fw, axis, 0)
    np.add.at(gm, i0 + 1, gsrc)
    return out


class _Upsampler:
    """Trilinear control-grid upsampling bound to one geometry."""

    def __init__(self, fixed_dims, cdims, stride):
        self.fixed_dims = tuple(fixed_dims)
        self.cdims = tuple(cdims)
        self.ax = [_axis_interp(fixed_dims[a], cdims[a], stride) for a in range(3)]

    def up(self, vals: np.ndarray) -> np.ndarray:
        out = vals
        for a in range(3):
            i0, f = self.ax[a]
            out = _interp_along(out, a + 1, i0, f)
        return out

    def down(self, g: np.ndarray) -> np.ndarray:
        out = g
        for a in (2, 1, 0):
            i0, f = self.ax[a]
            out = _interp_adjoint(out, a + 1, i0, f, self.cdims[a])
        return out


def upsample_field(D: DisplacementField) -> np.ndarray:
    """Full-resolution displacement (3, nx, ny, nz) in voxel units."""
    up = _Upsampler(D.fixed_dims, D.control_dims, D.stride)
    return up.up(D.values)


def field_at(D: DisplacementField, vox_pts: np.ndarray) -> np.ndarray:
    """Displacement at continuous fixed-voxel coordinates, (n, 3)."""
    pts = np.atleast_2d(np.asarray(vox_pts, dtype=np.float64))
    cdims = np.array(D.control_dims)
    t = np.clip(pts / D.stride, 0, cdims - 1)
    i0 = np.minimum(np.floor(t).astype(np.int64), cdims - 2)
    f = t - i0
    out = np.zeros((len(pts), 3))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (f[:, 0] if dx else 1 - f[:, 0]) \
                    * (f[:, 1] if dy else 1 - f[:, 1]) \
                    * (f[:, 2] if dz else 1 - f[:, 2])
                out += w[:, None] * D.values[:, i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz].T
    return out


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------

def _compose_map(fixed_affine, moving_affine, A: SimilarityTransform):
    """Affine (M, b) with moving-voxel q = M (x + u) + b for fixed-voxel x."""
    P = np.linalg.inv(np.asarray(moving_affine)) @ A.inverse().matrix() @ np.asarray(fixed_affine)
    return P[:3, :3], P[:3, 3]


def _gather_channels(F: np.ndarray, q: np.ndarray, want_grad: bool):
    """Clamped trilinear sampling of (C, nx, ny, nz) at q (n, 3).

    Returns values (C, n) and, optionally, gradients (C, n, 3) with zeros
    where the clamp is active.
    """
    dims = np.array(F.shape[1:])
    qc = np.clip(q, 0, dims - 1)
    i0 = np.minimum(np.floor(qc).astype(np.int64), np.maximum(dims - 2, 0))
    f = qc - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    wx, wy, wz = f[:, 0], f[:, 1], f[:, 2]
    vals = np.zeros((F.shape[0], len(q)))
    grads = np.zeros((F.shape[0], len(q), 3)) if want_grad else None
    for dx in (0, 1):
        ax = wx if dx else 1 - wx
        gx = 1.0 if dx else -1.0
        ix = i1[:, 0] if dx else i0[:, 0]
        for dy in (0, 1):
            ay = wy if dy else 1 - wy
            gy = 1.0 if dy else -1.0
            iy = i1[:, 1] if dy else i0[:, 1]
            for dz in (0, 1):
                az = wz if dz else 1 - wz
                gz = 1.0 if dz else -1.0
                iz = i1[:, 2] if dz else i0[:, 2]
                c = F[:, ix, iy, iz].astype(np.float64)
                vals += (ax * ay * az) * c
                if want_grad:
                    grads[:, :, 0] += (gx * ay * az) * c
                    grads[:, :, 1] += (ax * gy * az) * c
                    grads[:, :, 2] += (ax * ay * gz) * c
    if want_grad:
        # clamping is per-component: a clamped coordinate contributes no
        # gradient, the others still do
        for k in range(3):
            grads[:, q[:, k] != qc[:, k], k] = 0.0
        return vals, grads
    return vals, None


def warp(moving, A: SimilarityTransform, D: DisplacementField, mode: str = "trilinear"):
    """Pull-back warp of a Volume or DescriptorField onto fixed geometry."""
    fdims = D.fixed_dims
    x = np.indices(fdims, dtype=np.float64).reshape(3, -1).T
    u = upsample_field(D).reshape(3, -1).T
    if isinstance(moving, DescriptorField):
        M, b = _compose_map(D.fixed_affine, moving.affine, A)
        q = (x + u) @ M.T + b
        vals, _ = _gather_channels(moving.channels, q, want_grad=False)
        return DescriptorField(channels=vals.reshape(6, *fdims).astype(np.float32),
                               affine=D.fixed_affine)
    M, b = _compose_map(D.fixed_affine, moving.affine, A)
    q = (x + u) @ M.T + b
    if mode == "nearest":
        from .volume import sample
        vals = sample(moving, q, mode="nearest")
    else:
        vals, _ = _gather_channels(moving.data[None], q, want_grad=False)
        vals = vals[0]
    return Volume(data=vals.reshape(fdims).astype(np.float32), affine=D.fixed_affine)


def warp_labels(moving: "LabelMap", A: SimilarityTransform,
                D: DisplacementField):
    """Pull-back warp of a label map onto fixed geometry (nearest-neighbor,
    zero fill outside the moving domain)."""
    from .volume import LabelMap
    v = warp(Volume(data=moving.data.astype(np.float32), affine=moving.affine),
             A, D, mode="nearest")
    data = v.data.astype(moving.data.dtype)
    present = {int(l) for l in np.unique(data) if l}
    table = {l: n for l, n in moving.label_table.items() if l in present}
    return LabelMap(data=data, affine=v.affine, label_table=table)


def total_transform_point(A: SimilarityTransform, D: DisplacementField, p_fixed) -> np.ndarray:
    """Map fixed-space world points through the resampling transform into
    moving space (the exact map used to pull back the moving image)."""
    p = np.atleast_2d(np.asarray(p_fixed, dtype=np.float64))
    inv_f = np.linalg.inv(D.fixed_affine)
    x = p @ inv_f[:3, :3].T + inv_f[:3, 3]
    hi = np.array(D.fixed_dims) - 1
    if np.any(x < -0.5) or np.any(x > hi + 0.5):
        raise DeformError("point outside fixed domain")
    u = field_at(D, x)
    xf = x + u
    world = xf @ D.fixed_affine[:3, :3].T + D.fixed_affine[:3, 3]
    return A.inverse().apply_to_points(world)


# ---------------------------------------------------------------------------
# Registration loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRow:
    s: int
    eta: float
    S: float
    R: float
    L: float


def objective_and_grad(ff: DescriptorField, fm: DescriptorField,
                       A: SimilarityTransform, D: DisplacementField,
                       cfg: RegConfig, upsampler: _Upsampler | None = None):
    """L = S + lambda*R and its analytic gradient w.r.t. control values."""
    fdims = D.fixed_dims
    n_comp = 6 * int(np.prod(fdims))
    up = upsampler or _Upsampler(fdims, D.control_dims, D.stride)
    x = np.indices(fdims, dtype=np.float64).reshape(3, -1).T
    u = up.up(D.values).reshape(3, -1).T
    M, b = _compose_map(D.fixed_affine, fm.affine, A)
    q = (x + u) @ M.T + b
    vals, grads = _gather_channels(fm.channels, q, want_grad=True)
    diff = vals - ff.channels.reshape(6, -1).astype(np.float64)
    S = float(np.mean(diff * diff))
    dSdq = (2.0 / n_comp) * np.einsum("cn,cnk->nk", diff, grads)
    dSdu = dSdq @ M            # (n, 3)
    dS = up.down(dSdu.T.reshape(3, *fdims))
    R, dR = regularizer_R(D, eps=cfg.grad_eps, with_grad=True)
    L = S + cfg.lam * R
    return L, S, R, dS + cfg.lam * dR


def register_deformable(fixed: Volume, moving: Volume, A: SimilarityTransform,
                        cfg: RegConfig = RegConfig()):
    """Optimize the displacement field; returns (field, trace rows)."""
    ff = mind_descriptors(fixed, cfg.mind)
    fm = mind_descriptors(moving, cfg.mind)
    D = DisplacementField.zeros(fixed.dims, fixed.affine, stride=cfg.stride)
    up = _Upsampler(D.fixed_dims, D.control_dims, cfg.stride)
    state = OptimizerState.zeros(D.values.shape)
    trace: list[TraceRow] = []
    for s in range(cfg.iterations):
        L, S, R, grad = objective_and_grad(ff, fm, A, D, cfg, upsampler=up)
        if not np.isfinite(L):
            raise DeformError(f"non-finite loss at iteration {s}: S={S} R={R}")
        eta = pwd_learning_rate(min(s, 250)) * cfg.lr_scale
        D.values += adam_step(state, grad, eta)
        trace.append(TraceRow(s=s, eta=float(eta), S=S, R=R, L=float(L)))
    return D, trace


def write_trace_csv(trace, path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["s", "eta", "S", "R", "L"])
        for row in trace:
            w.writerow([row.s, f"{row.eta:.6f}", f"{row.S:.8e}",
                        f"{row.R:.8e}", f"{row.L:.8e}"])


# ---------------------------------------------------------------------------
# Field I/O: 3-channel NIfTI (voxel units) + JSON metadata
# ---------------------------------------------------------------------------

def save_field(D: DisplacementField, path: str, meta_path: str | None = None,
               lam: float | None = None, iterations: int | None = None) -> None:
    nx, ny, nz = D.fixed_dims
    full = upsample_field(D).astype(np.float32)        # (3, nx, ny, nz)
    data = np.moveaxis(full, 0, -1)                    # (nx, ny, nz, 3)
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 5, nx, ny, nz, 1, 3, 1, 1)
    struct.pack_into("<2h", hdr, 70, 16, 32)
    sp = np.linalg.norm(np.asarray(D.fixed_affine)[:3, :3], axis=0)
    struct.pack_into("<8f", hdr, 76, 1.0, *sp, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<2h", hdr, 252, 0, 1)
    srow = np.asarray(D.fixed_affine, dtype=np.float32)[:3, :]
    struct.pack_into("<12f", hdr, 280, *srow.ravel())
    hdr[344:348] = b"n+1\x00"
    payload = bytes(hdr) + data.tobytes(order="F")
    if path.endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as f:
        f.write(payload)
    meta = {"stride": D.stride,
            "control_dims": list(D.control_dims),
            "lambda": lam, "iterations": iterations}
    with open(meta_path or path.rsplit(".nii", 1)[0] + ".field.json", "w") as f:
        json.dump(meta, f, indent=1)


def load_field(path: str, meta_path: str | None = None) -> DisplacementField:
    raw = _read_bytes(path)
    h = _read_header(raw)
    if h["dim"][0] != 5 or h["dim"][5] != 3:
        raise VolumeError("not a 3-channel displacement field NIfTI")
    nx, ny, nz = h["dim"][1:4]
    dt = np.dtype(np.float32).newbyteorder(h["bo"])
    n = nx * ny * nz * 3
    start = h["vox_offset"] or 352
    arr = np.frombuffer(raw[start:start + n * 4], dtype=dt)
    data = arr.reshape((nx, ny, nz, 1, 3), order="F")[:, :, :, 0, :]
    affine = _header_affine(h)
    meta_path = meta_path or path.rsplit(".nii", 1)[0] + ".field.json"
    with open(meta_path) as f:
        meta = json.load(f)
    stride = int(meta["stride"])
    full = np.moveaxis(np.ascontiguousarray(data), -1, 0).astype(np.float64)
    D = DisplacementField.zeros((nx, ny, nz), affine, stride=stride)
    # control values are exact grid samples of the upsampled field
    cx, cy, cz = D.control_dims
    xi = np.minimum(np.arange(cx) * stride, nx - 1)
    yi = np.minimum(np.arange(cy) * stride, ny - 1)
    zi = np.minimum(np.arange(cz) * stride, nz - 1)
    D.values = full[:, xi][:, :, yi][:, :, :, zi]
    return D
