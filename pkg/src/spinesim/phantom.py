"""Synthetic test case generator: a textured spine-like CT, a deformed and
intensity-remapped MRI counterpart, segmentations for both, landmarks with
ground-truth correspondence, and the true deformation for evaluation.

No clinical data is required anywhere in the test suite; this phantom
exercises the full pipeline end to end.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .metrics import NamedLandmark, save_landmarks
from .volume import LabelMap, Volume, save_volume, structure_id, smooth_array


def _rotz(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a), 0],
                     [np.sin(a), np.cos(a), 0],
                     [0, 0, 1.0]])


class PhantomCase:
    def __init__(self, size: int = 64, deform_amp: float = 5.0, seed: int = 7,
                 rot_deg: float = 4.0, shift_mm=(2.5, -2.0, 1.5)):
        self.size = size
        self.amp = deform_amp
        self.seed = seed
        self.rot = _rotz(rot_deg)
        self.shift = np.asarray(shift_mm, dtype=np.float64)
        self.affine = np.eye(4)     # 1 mm isotropic: voxel == mm
        self._build()

    # ground-truth moving -> fixed map: W(y) = R y + t + v(y)
    def gt_map(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(y)
        return y @ self.rot.T + self.shift + self._sinusoid(y)

    def gt_inverse(self, x: np.ndarray, iters: int = 60) -> np.ndarray:
        """Solve W(y) = x by fixed-point iteration (contraction: |grad v|<1)."""
        x = np.atleast_2d(x)
        rinv = self.rot.T
        y = (x - self.shift) @ rinv.T
        for _ in range(iters):
            y = (x - self.shift - self._sinusoid(y)) @ rinv.T
        return y

    def _sinusoid(self, y: np.ndarray) -> np.ndarray:
        n = self.size
        c = 2 * np.pi / n
        yy = np.atleast_2d(y)
        a = self.amp
        return np.stack([
            a * np.sin(c * yy[:, 1] + 0.9) * np.cos(c * yy[:, 2] - 0.4),
            a * np.sin(c * yy[:, 2] + 2.1) * np.cos(c * yy[:, 0] + 0.3),
            a * 0.6 * np.sin(c * yy[:, 0] - 1.2) * np.cos(c * yy[:, 1] + 1.7),
        ], axis=1)

    def _build(self):
        n = self.size
        rng = np.random.default_rng(self.seed)
        ax = np.arange(n)
        X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
        cx = cy = n / 2

        seg = np.zeros((n, n, n), np.uint16)
        vert_names = ["L3", "L4", "L5"]
        self.vert_labels = [structure_id(v) for v in vert_names]
        zspans = []
        block = n // 5
        # gentle lordotic curve so per-level centroids are not collinear
        curve = [(-n * 0.03, n * 0.04), (n * 0.04, -n * 0.02), (0.0, n * 0.05)]
        for i, name in enumerate(vert_names):
            z0 = int(n * 0.12) + i * int(block * 1.3)
            z1 = z0 + block
            zspans.append((z0, z1))
            ox, oy = curve[i % len(curve)]
            body = ((X - cx - ox) ** 2 / (n * 0.18) ** 2
                    + (Y - cy - oy + n * 0.08) ** 2 / (n * 0.14) ** 2 <= 1.0) \
                   & (Z >= z0) & (Z < z1)
            # posterior arch
            arch = ((X - cx - ox) ** 2 / (n * 0.06) ** 2
                    + (Y - cy - oy - n * 0.18) ** 2 / (n * 0.10) ** 2 <= 1.0) \
                   & (Z >= z0) & (Z < z1)
            seg[body | arch] = structure_id(name)
        # discs between vertebrae
        for i in range(len(zspans) - 1):
            z0, z1 = zspans[i][1], zspans[i + 1][0]
            if z1 <= z0:
                continue
            disc = ((X - cx) ** 2 / (n * 0.16) ** 2
                    + (Y - cy + n * 0.08) ** 2 / (n * 0.12) ** 2 <= 1.0) \
                   & (Z >= z0) & (Z < z1)
            seg[disc & (seg == 0)] = 100 + self.vert_labels[i]
        # spinal canal: csf ring around cord
        canal_r2 = (X - cx) ** 2 + (Y - cy - n * 0.06) ** 2
        cord = canal_r2 <= (n * 0.035) ** 2
        csf = (canal_r2 <= (n * 0.055) ** 2) & ~cord
        zlo, zhi = zspans[0][0], zspans[-1][1]
        zmask = (Z >= zlo) & (Z < zhi)
        seg[cord & zmask] = structure_id("spinal_cord")
        seg[csf & zmask & np.isin(seg, [0] + self.vert_labels)] = structure_id("csf")
        # nerve roots: thin lateral tubes at disc levels
        for i in range(len(zspans) - 1):
            zm = (zspans[i][1] + zspans[i + 1][0]) // 2
            for sx in (-1, 1):
                tube = ((Y - cy - n * 0.06) ** 2 + (Z - zm) ** 2 <= (n * 0.018) ** 2) \
                       & (sx * (X - cx) > n * 0.03) & (sx * (X - cx) < n * 0.22)
                seg[tube] = structure_id("nerve_roots")
        # ligamentum flavum: posterior band
        lig = ((X - cx) ** 2 / (n * 0.05) ** 2
               + (Y - cy - n * 0.12) ** 2 / (n * 0.03) ** 2 <= 1.0) & zmask
        seg[lig & (seg == 0)] = structure_id("ligamentum_flavum")
        self.seg = seg

        # CT intensities: tissue means + smooth texture so descriptors carry
        # structure everywhere
        means = np.full((n, n, n), 60.0)
        means[np.isin(seg, self.vert_labels)] = 400.0
        means[seg == structure_id("spinal_cord")] = 80.0
        means[seg == structure_id("csf")] = 20.0
        means[(seg >= 100) & (seg < 200)] = 120.0
        texture = smooth_array(rng.normal(size=(n, n, n)) * 220.0, 2.0)
        ct = smooth_array(means, 1.0) + texture
        self.ct = Volume(data=ct.astype(np.float32), affine=self.affine)

        # moving image: pull back through the ground-truth map, then remap
        # intensities monotonically (simulated modality change)
        idx = np.indices((n, n, n), dtype=np.float64).reshape(3, -1).T
        src = self.gt_map(idx)
        from .volume import sample
        vals = sample(self.ct, src, mode="trilinear")
        lo, hi = vals.min(), vals.max()
        u = (vals - lo) / (hi - lo + 1e-12)
        remapped = 1000.0 * np.sqrt(u)          # monotone nonlinear remap
        self.mri = Volume(data=remapped.reshape(n, n, n).astype(np.float32),
                          affine=self.affine)

        table = {int(l): self._name(l) for l in np.unique(seg) if l}
        self.ct_seg = LabelMap(data=seg, affine=self.affine, label_table=table)
        seg_m = sample(self.ct_seg, src, mode="nearest").reshape(n, n, n)
        self.mri_seg = LabelMap(data=seg_m.astype(np.uint16), affine=self.affine,
                                label_table=table)

        # split the CT bone map into a primary (per-level, no sacrum) and a
        # secondary (adds sacrum-like lowest block) for the fusion stage
        prim = seg.copy()
        sec = seg.copy()
        sacrum = structure_id("sacrum")
        z1 = zspans[0][0]
        z0 = max(0, z1 - block)
        sac_blob = ((X - cx) ** 2 / (n * 0.20) ** 2
                    + (Y - cy + n * 0.05) ** 2 / (n * 0.16) ** 2 <= 1.0) \
                   & (Z >= z0) & (Z < z1)
        sec[sac_blob & (sec == 0)] = sacrum
        table_sec = dict(table)
        table_sec[sacrum] = "sacrum"
        self.ct_seg_primary = LabelMap(data=prim, affine=self.affine, label_table=table)
        self.ct_seg_secondary = LabelMap(data=sec, affine=self.affine,
                                         label_table=table_sec)

        # landmarks: spinous tip and transverse processes per vertebra
        fixed_lms, moving_lms = [], []
        for (z0v, z1v), lab in zip(zspans, self.vert_labels):
            zm = (z0v + z1v) / 2.0
            spots = {
                "spinous": np.array([cx, cy + n * 0.27, zm]),
                "left_transverse": np.array([cx - n * 0.20, cy + n * 0.05, zm]),
                "right_transverse": np.array([cx + n * 0.20, cy + n * 0.05, zm]),
            }
            for kind, p in spots.items():
                fixed_lms.append(NamedLandmark(level=lab, kind=kind,
                                               position=p, space="fixed"))
                q = self.gt_inverse(p)[0]
                moving_lms.append(NamedLandmark(level=lab, kind=kind,
                                                position=q, space="moving"))
        self.fixed_landmarks = fixed_lms
        self.moving_landmarks = moving_lms

    @staticmethod
    def _name(label: int) -> str:
        from .volume import structure_name
        return structure_name(int(label))

    def initial_landmark_error(self) -> float:
        errs = [np.linalg.norm(f.position - m.position)
                for f, m in zip(self.fixed_landmarks, self.moving_landmarks)]
        return float(np.mean(errs))

    def write(self, out_dir: str) -> dict:
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "ct": os.path.join(out_dir, "ct.nii.gz"),
            "mri": os.path.join(out_dir, "mri.nii.gz"),
            "ct_seg": os.path.join(out_dir, "ct_seg.nii.gz"),
            "ct_seg_secondary": os.path.join(out_dir, "ct_seg_secondary.nii.gz"),
            "mri_seg": os.path.join(out_dir, "mri_seg.nii.gz"),
            "landmarks_fixed": os.path.join(out_dir, "landmarks_fixed.json"),
            "landmarks_moving": os.path.join(out_dir, "landmarks_moving.json"),
        }
        save_volume(self.ct, paths["ct"])
        save_volume(self.mri, paths["mri"])
        save_volume(self.ct_seg_primary, paths["ct_seg"])
        save_volume(self.ct_seg_secondary, paths["ct_seg_secondary"])
        save_volume(self.mri_seg, paths["mri_seg"])
        save_landmarks(self.fixed_landmarks, paths["landmarks_fixed"])
        save_landmarks(self.moving_landmarks, paths["landmarks_moving"])
        with open(os.path.join(out_dir, "phantom.json"), "w") as f:
            json.dump({"size": self.size, "deform_amp": self.amp,
                       "seed": self.seed,
                       "initial_landmark_error_mm": self.initial_landmark_error()},
                      f, indent=1)
        return paths
