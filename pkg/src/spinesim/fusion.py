"""Segmentation fusion: union of vertebral label maps, component cleanup,
centroids, and merging bone with soft tissue into one model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import (
    DISC_LABELS,
    LabelMap,
    VolumeError,
    same_geometry,
    structure_id,
    VERTEBRA_LABELS,
)


@dataclass(frozen=True)
class FusionPolicy:
    """Conflict resolution for the two vertebral segmentations.

    The primary map wins wherever both maps disagree; labels listed in
    secondary_only_labels are expected to come only from the secondary map
    (sacrum by default).
    """
    secondary_only_labels: frozenset[int] = frozenset({structure_id("sacrum")})


# Precedence classes, highest priority first.  Neural structures outrank
# bone so the proximity alarm can never lose cord voxels to overlap.
DEFAULT_PRECEDENCE = ("spinal_cord", "nerve_roots", "csf",
                      "ligamentum_flavum", "discs", "vertebrae")

_CLASS_MEMBERS = {
    "spinal_cord": frozenset({structure_id("spinal_cord")}),
    "nerve_roots": frozenset({structure_id("nerve_roots")}),
    "csf": frozenset({structure_id("csf")}),
    "ligamentum_flavum": frozenset({structure_id("ligamentum_flavum")}),
    "discs": DISC_LABELS,
    "vertebrae": VERTEBRA_LABELS,
}


@dataclass(frozen=True)
class MergePrecedence:
    classes: tuple[str, ...] = DEFAULT_PRECEDENCE

    def rank(self, label: int) -> int:
        """Smaller rank wins; unknown labels sort last."""
        for i, cls in enumerate(self.classes):
            if label in _CLASS_MEMBERS.get(cls, ()):
                return i
        return len(self.classes)


def fuse_union(primary: LabelMap, secondary: LabelMap,
               policy: FusionPolicy = FusionPolicy()) -> LabelMap:
    """Voxel-wise union of two label maps; primary wins conflicts."""
    if not same_geometry(primary, secondary):
        raise VolumeError("fuse_union: geometry mismatch")
    out = np.where(primary.data != 0, primary.data, secondary.data)
    table = dict(secondary.label_table)
    table.update(primary.label_table)
    return LabelMap(data=out.astype(np.uint16), affine=primary.affine,
                    label_table=table)


def largest_component(lm: LabelMap, label: int) -> LabelMap:
    """Keep only the largest 26-connected component of ``label``.

    Ties are broken by the component containing the smallest linear
    (x-fastest) index.  Absent labels leave the map unchanged.
    """
    mask = lm.data == label
    if not mask.any():
        return lm
    comps, n = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=np.uint8))
    if n <= 1:
        return lm
    sizes = ndimage.sum_labels(np.ones_like(comps), comps, index=range(1, n + 1))
    best = np.flatnonzero(sizes == sizes.max()) + 1
    if len(best) > 1:
        # x-fastest linear index, matching the on-disk layout
        lin = np.arange(comps.size).reshape(comps.shape, order="F")
        firsts = [lin[comps == c].min() for c in best]
        keep = best[int(np.argmin(firsts))]
    else:
        keep = best[0]
    out = lm.data.copy()
    out[mask & (comps != keep)] = 0
    return LabelMap(data=out, affine=lm.affine, label_table=lm.label_table)


def label_centroids(lm: LabelMap, labels) -> tuple[list[tuple[int, np.ndarray]], list[int]]:
    """World-space (mm) centroids of the requested labels.

    Returns (present, missing): present as a list of (label, xyz mm),
    missing as the labels with no voxels.
    """
    present, missing = [], []
    for label in labels:
        idx = np.argwhere(lm.data == label)
        if len(idx) == 0:
            missing.append(int(label))
            continue
        world = lm.voxel_to_world(idx.astype(np.float64))
        present.append((int(label), world.mean(axis=0)))
    return present, missing


def merge_structures(bone: LabelMap, soft_in_ct_space: LabelMap,
                     prec: MergePrecedence = MergePrecedence()) -> LabelMap:
    """Per-voxel highest-precedence nonzero label of the two maps."""
    if not same_geometry(bone, soft_in_ct_space):
        raise VolumeError("merge_structures: geometry mismatch")
    a, b = bone.data, soft_in_ct_space.data
    labels = sorted((set(np.unique(a).tolist()) | set(np.unique(b).tolist())) - {0})
    rank = np.full(max(labels, default=0) + 1, np.iinfo(np.int32).max, dtype=np.int32)
    for l in labels:
        rank[l] = prec.rank(l)
    ra = np.where(a != 0, rank[a], np.iinfo(np.int32).max)
    rb = np.where(b != 0, rank[b], np.iinfo(np.int32).max)
    out = np.where(rb < ra, b, a)
    out = np.where((a == 0) & (b != 0), b, out)
    table = dict(bone.label_table)
    table.update(soft_in_ct_space.label_table)
    return LabelMap(data=out.astype(np.uint16), affine=bone.affine, label_table=table)
