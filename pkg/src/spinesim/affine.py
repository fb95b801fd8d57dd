"""Landmark-based similarity transform (rotation + uniform scale +
translation) between paired vertebral centroids, SVD closed form."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .volume import Volume, resample_into, structure_name

log = logging.getLogger(__name__)


class RegistrationError(Exception):
    pass


@dataclass(frozen=True)
class SimilarityTransform:
    """Maps moving-space mm points to fixed-space mm: p_f = s*R*p_m + t."""

    rotation: np.ndarray   # 3x3, det +1
    scale: float
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(3))
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise RegistrationError("rotation is not orthonormal")
        if np.linalg.det(R) <= 0:
            raise RegistrationError("rotation must be proper (det +1)")
        if self.scale <= 0:
            raise RegistrationError("scale must be positive")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(rotation=np.eye(3), scale=1.0, translation=np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "SimilarityTransform":
        Rinv = self.rotation.T
        sinv = 1.0 / self.scale
        return SimilarityTransform(rotation=Rinv, scale=sinv,
                                   translation=-sinv * (Rinv @ self.translation))

    def apply_to_points(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return self.scale * (pts @ self.rotation.T) + self.translation

    def to_json(self) -> dict:
        return {
            "matrix_mm": self.matrix().tolist(),
            "rotation": self.rotation.tolist(),
            "scale": float(self.scale),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SimilarityTransform":
        return cls(rotation=np.array(doc["rotation"]),
                   scale=float(doc["scale"]),
                   translation=np.array(doc["translation"]))

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def load(cls, path: str) -> "SimilarityTransform":
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass(frozen=True)
class LandmarkPairSet:
    """Per-level (moving mm, fixed mm) centroid pairs."""

    levels: tuple[int, ...]
    moving: np.ndarray   # (n, 3)
    fixed: np.ndarray    # (n, 3)
    unmatched_moving: tuple[int, ...] = ()
    unmatched_fixed: tuple[int, ...] = ()

    def __len__(self):
        return len(self.levels)


def pair_by_level(moving_centroids, fixed_centroids) -> LandmarkPairSet:
    """Pair centroids by vertebral level, reporting unmatched levels.

    Inputs are lists of (label, xyz mm) as produced by label_centroids.
    """
    mv = {int(l): np.asarray(p, dtype=np.float64) for l, p in moving_centroids}
    fx = {int(l): np.asarray(p, dtype=np.float64) for l, p in fixed_centroids}
    common = sorted(set(mv) & set(fx))
    if len(common) < 3:
        raise RegistrationError(
            f"insufficient landmarks: {len(common)} common levels, need >= 3")
    pairs = LandmarkPairSet(
        levels=tuple(common),
        moving=np.stack([mv[l] for l in common]),
        fixed=np.stack([fx[l] for l in common]),
        unmatched_moving=tuple(sorted(set(mv) - set(fx))),
        unmatched_fixed=tuple(sorted(set(fx) - set(mv))),
    )
    for levels in (pairs.unmatched_moving, pairs.unmatched_fixed):
        for l in levels:
            log.info("unmatched level: %s", structure_name(l))
    return pairs


def estimate_similarity(pairs: LandmarkPairSet) -> SimilarityTransform:
    """Least-squares similarity fit from paired points (SVD closed form).

    Demeans both sets, builds the cross-covariance, takes R from the SVD
    with a reflection guard (smallest singular axis flipped when det < 0),
    scale from the guarded singular values over the moving-set spread, and
    translation from the centroids.
    """
    if len(pairs) < 3:
        raise RegistrationError("need at least 3 pairs")
    x = np.asarray(pairs.moving, dtype=np.float64)
    y = np.asarray(pairs.fixed, dtype=np.float64)
    mx, my = x.mean(axis=0), y.mean(axis=0)
    dx, dy = x - mx, y - my
    cov = dy.T @ dx / len(x)
    if np.linalg.matrix_rank(cov, tol=1e-9 * max(1.0, np.abs(cov).max())) < 2:
        raise RegistrationError("degenerate landmark configuration (collinear points)")
    U, d, Vt = np.linalg.svd(cov)
    guard = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        guard[2] = -1.0
    R = U @ np.diag(guard) @ Vt
    var = (dx ** 2).sum() / len(x)
    scale = float((d * guard).sum() / var)
    if scale <= 0:
        raise RegistrationError("non-positive scale from degenerate input")
    t = my - scale * (R @ mx)
    if not (0.95 <= scale <= 1.05):
        log.warning("estimated scale %.4f outside [0.95, 1.05]; "
                    "check scanner calibration", scale)
    return SimilarityTransform(rotation=R, scale=scale, translation=t)


def apply_to_points(T: SimilarityTransform, points) -> np.ndarray:
    return T.apply_to_points(points)


def apply_to_volume(T: SimilarityTransform, moving: Volume,
                    fixed_affine, fixed_dims) -> Volume:
    """Resample the moving volume onto fixed geometry via the pull-back
    (inverse) mapping of T; trilinear interpolation."""
    inv = T.inverse()
    return resample_into(moving, fixed_affine, fixed_dims,
                         mapping=inv.apply_to_points, mode="trilinear")
