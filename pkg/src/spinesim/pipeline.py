"""End-to-end model generation: ingest -> fuse -> affine -> deformable ->
merge -> mesh, with timing, metrics, report, and figures."""

from __future__ import annotations

import logging
import os

import numpy as np

from . import deform as dm
from .affine import SimilarityTransform, estimate_similarity, pair_by_level
from .fusion import fuse_union, label_centroids, largest_component, merge_structures
from .meshing import build_scene, export_gltf
from .metrics import TimingReport, cohort_tre, dice, emit_report, load_landmarks, tre
from .volume import (
    LabelMap,
    VERTEBRA_LABELS,
    load_labelmap,
    load_volume,
    save_volume,
)

log = logging.getLogger(__name__)

CASE_FILES = {
    "ct": "ct.nii.gz",
    "mri": "mri.nii.gz",
    "ct_seg": "ct_seg.nii.gz",
    "mri_seg": "mri_seg.nii.gz",
}
OPTIONAL_FILES = {
    "ct_seg_secondary": "ct_seg_secondary.nii.gz",
    "landmarks_fixed": "landmarks_fixed.json",
    "landmarks_moving": "landmarks_moving.json",
}


class PipelineError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def find_case_files(case_dir: str) -> dict:
    """Locate the case inventory, tolerating .nii for .nii.gz."""
    found = {}
    for key, fname in {**CASE_FILES, **OPTIONAL_FILES}.items():
        for cand in (fname, fname.removesuffix(".gz")):
            p = os.path.join(case_dir, cand)
            if os.path.exists(p):
                found[key] = p
                break
    missing = [k for k in CASE_FILES if k not in found]
    if missing:
        raise PipelineError("segmentation-ingest",
                            f"case dir {case_dir} missing {missing}")
    return found


def run_pipeline(case_dir: str, out_dir: str,
                 cfg: dm.RegConfig | None = None,
                 smooth_iterations: int = 10,
                 progress=None) -> dict:
    """Run every stage; writes artifacts under out_dir and returns the
    report document."""
    cfg = cfg or dm.RegConfig()
    os.makedirs(out_dir, exist_ok=True)
    files = find_case_files(case_dir)
    timings = TimingReport()

    def note(stage):
        if progress:
            progress(stage)

    note("segmentation-ingest")
    with timings.stage("segmentation-ingest"):
        try:
            ct = load_volume(files["ct"])
            mri = load_volume(files["mri"])
            ct_seg = load_labelmap(files["ct_seg"])
            mri_seg = load_labelmap(files["mri_seg"])
            ct_seg_secondary = (load_labelmap(files["ct_seg_secondary"])
                                if "ct_seg_secondary" in files else None)
        except Exception as e:
            raise PipelineError("segmentation-ingest", str(e)) from e

    note("fusion")
    with timings.stage("fusion"):
        try:
            if ct_seg_secondary is not None:
                fused = fuse_union(ct_seg, ct_seg_secondary)
            else:
                fused = ct_seg
            for label in fused.labels_present():
                if label in VERTEBRA_LABELS:
                    fused = largest_component(fused, label)
            save_volume(fused, os.path.join(out_dir, "fused_seg.nii.gz"))
        except Exception as e:
            raise PipelineError("fusion", str(e)) from e

    note("affine")
    with timings.stage("affine"):
        try:
            vert = sorted(set(fused.labels_present()) & VERTEBRA_LABELS)
            fixed_c, _ = label_centroids(fused, vert)
            moving_c, _ = label_centroids(mri_seg, vert)
            pairs = pair_by_level(moving_c, fixed_c)
            A = estimate_similarity(pairs)
            A.save(os.path.join(out_dir, "affine.json"))
        except Exception as e:
            raise PipelineError("affine", str(e)) from e

    note("deformable")
    with timings.stage("deformable"):
        try:
            D, trace = dm.register_deformable(ct, mri, A, cfg)
            dm.save_field(D, os.path.join(out_dir, "field.nii.gz"),
                          lam=cfg.lam, iterations=cfg.iterations)
            dm.write_trace_csv(trace, os.path.join(out_dir, "trace.csv"))
            warped = dm.warp(mri, A, D)
            save_volume(warped, os.path.join(out_dir, "mri_warped.nii.gz"))
            warped_seg = dm.warp_labels(mri_seg, A, D)
            save_volume(warped_seg, os.path.join(out_dir, "mri_seg_warped.nii.gz"))
        except Exception as e:
            raise PipelineError("deformable", str(e)) from e

    # merge bone with warped soft tissue (soft labels only: neural, discs,
    # ligament; vertebra labels come from CT)
    soft = warped_seg.data.copy()
    soft[np.isin(soft, sorted(VERTEBRA_LABELS))] = 0
    soft_lm = LabelMap(data=soft, affine=warped_seg.affine,
                       label_table=warped_seg.label_table)
    model = merge_structures(fused, soft_lm)
    save_volume(model, os.path.join(out_dir, "model_seg.nii.gz"))

    note("meshing")
    with timings.stage("meshing"):
        try:
            scene = build_scene(model, smooth_iterations=smooth_iterations)
            export_gltf(scene, os.path.join(out_dir, "model.glb"))
        except Exception as e:
            raise PipelineError("meshing", str(e)) from e

    metrics: dict = {"dsc": {}, "tre": {}}
    # DSC between CT-derived and warped-MRI-derived labels where both exist
    from .volume import structure_name
    for label in sorted(set(fused.labels_present())
                        & set(warped_seg.labels_present())):
        metrics["dsc"][structure_name(label)] = dice(fused, warped_seg, label)
    if "landmarks_fixed" in files and "landmarks_moving" in files:
        fixed_lms = load_landmarks(files["landmarks_fixed"])
        moving_lms = load_landmarks(files["landmarks_moving"])
        rep = tre(fixed_lms, moving_lms, A, D,
                  patient=os.path.basename(os.path.normpath(case_dir)))
        rep0 = tre(fixed_lms, moving_lms, SimilarityTransform.identity(), None,
                   patient="unregistered")
        metrics["tre"] = {
            "patients": [rep.to_json()],
            "cohort": cohort_tre([rep]),
            "initial_mean_mm": rep0.patient_mean,
        }
    metrics["registration"] = {
        "iterations": cfg.iterations, "lambda": cfg.lam, "stride": cfg.stride,
        "final_loss": trace[-1].L, "final_similarity": trace[-1].S,
        "final_regularizer": trace[-1].R,
    }

    report = emit_report(metrics, timings, os.path.join(out_dir, "report.json"))
    try:
        render_figures(trace, metrics, out_dir)
    except Exception:
        log.exception("figure rendering failed; continuing")
    return report


def render_figures(trace, metrics: dict, out_dir: str) -> list[str]:
    """Convergence and TRE figures next to the delimited outputs."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    s = [t.s for t in trace]
    fig, axes = plt.subplots(2, 1, figsize=(7, 7), sharex=True)
    axes[0].plot(s, [t.L for t in trace], label="total loss")
    axes[0].plot(s, [t.S for t in trace], label="similarity")
    axes[0].plot(s, [t.R for t in trace], label="regularizer")
    axes[0].set_ylabel("objective")
    axes[0].legend(loc="best")
    axes[1].plot(s, [t.eta for t in trace], color="tab:red")
    axes[1].set_ylabel("learning rate")
    axes[1].set_xlabel("iteration")
    fig.tight_layout()
    p = os.path.join(out_dir, "convergence.png")
    fig.savefig(p, dpi=110)
    plt.close(fig)
    written.append(p)

    tre_m = metrics.get("tre", {})
    patients = tre_m.get("patients") or []
    if patients:
        per_vert = patients[0]["per_vertebra"]
        fig, ax = plt.subplots(figsize=(6, 4))
        names = list(per_vert)
        ax.bar(names, [per_vert[n] for n in names], color="tab:blue")
        if "initial_mean_mm" in tre_m:
            ax.axhline(tre_m["initial_mean_mm"], color="tab:gray", ls="--",
                       label="unregistered mean")
            ax.legend()
        ax.set_ylabel("TRE (mm)")
        fig.tight_layout()
        p = os.path.join(out_dir, "tre.png")
        fig.savefig(p, dpi=110)
        plt.close(fig)
        written.append(p)
    return written
