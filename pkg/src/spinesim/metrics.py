"""Evaluation: Dice overlap, target registration error with three-level
aggregation (landmark, vertebra, patient), and stage timing reports."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .affine import SimilarityTransform
from .deform import DisplacementField, total_transform_point
from .volume import LabelMap, VolumeError, same_geometry, structure_id

LANDMARK_KINDS = ("spinous", "left_transverse", "right_transverse")

# Cohort values reported in the source study (GPU workstation, 15 patients);
# carried into reports as reference context, not desk-reproducible here.
REFERENCE_VALUES = {
    "dsc": {"vertebral_bone": [0.95, 0.03],
            "intervertebral_discs": [0.87, 0.04],
            "neural_elements": [0.92, 0.01]},
    "tre_mm": [1.73, 0.42],
    "registration_time_s": 20.0,
    "total_model_generation_time_s": 155.0,
}


@dataclass(frozen=True)
class NamedLandmark:
    level: int               # StructureId of the vertebra
    kind: str                # spinous | left_transverse | right_transverse
    position: np.ndarray     # world mm
    space: str               # fixed | moving

    def __post_init__(self):
        if self.kind not in LANDMARK_KINDS:
            raise ValueError(f"unknown landmark kind {self.kind!r}")
        if self.space not in ("fixed", "moving"):
            raise ValueError(f"unknown space {self.space!r}")
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=np.float64).reshape(3))


def load_landmarks(path: str) -> list[NamedLandmark]:
    """Flat JSON list: {"space": ..., "landmarks": [{level, kind, position_mm}]}."""
    with open(path) as f:
        doc = json.load(f)
    space = doc["space"]
    out = []
    seen = set()
    for item in doc["landmarks"]:
        lm = NamedLandmark(level=structure_id(item["level"]), kind=item["kind"],
                           position=item["position_mm"], space=space)
        key = (lm.level, lm.kind)
        if key in seen:
            raise ValueError(f"duplicate landmark {item['level']}/{item['kind']}")
        seen.add(key)
        out.append(lm)
    return out


def save_landmarks(landmarks, path: str) -> None:
    from .volume import structure_name
    if not landmarks:
        raise ValueError("no landmarks to save")
    doc = {"space": landmarks[0].space,
           "landmarks": [{"level": structure_name(l.level), "kind": l.kind,
                          "position_mm": l.position.tolist()} for l in landmarks]}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

def dice(a: LabelMap, b: LabelMap, label: int) -> float:
    """2|A∩B| / (|A|+|B|) over voxels equal to label; both empty -> 1.0."""
    if not same_geometry(a, b):
        raise VolumeError("dice: geometry mismatch")
    ma = a.data == label
    mb = b.data == label
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / denom


# ---------------------------------------------------------------------------
# TRE
# ---------------------------------------------------------------------------

@dataclass
class TreReport:
    patient: str
    per_landmark: list[dict]            # {level, kind, error_mm}
    per_vertebra: dict[int, float]      # level -> mean error
    patient_mean: float
    unmatched: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        from .volume import structure_name
        return {
            "patient": self.patient,
            "per_landmark": [
                {"vertebra": structure_name(e["level"]), "kind": e["kind"],
                 "error_mm": e["error_mm"]} for e in self.per_landmark],
            "per_vertebra": {structure_name(l): v for l, v in self.per_vertebra.items()},
            "patient_mean_mm": self.patient_mean,
            "unmatched": self.unmatched,
        }


def tre(fixed_lms, moving_lms, A: SimilarityTransform, D: DisplacementField | None,
        patient: str = "case") -> TreReport:
    """Per-landmark Euclidean errors after mapping fixed landmarks through
    the registration into moving space, aggregated per vertebra and patient."""
    fx = {(l.level, l.kind): l for l in fixed_lms if l.space == "fixed"}
    mv = {(l.level, l.kind): l for l in moving_lms if l.space == "moving"}
    common = sorted(set(fx) & set(mv))
    if not common:
        raise ValueError("no matched landmark pairs")
    unmatched = [{"level": k[0], "kind": k[1], "space": sp}
                 for keys, sp in ((set(fx) - set(mv), "fixed"),
                                  (set(mv) - set(fx), "moving"))
                 for k in sorted(keys)]
    per_landmark = []
    for level, kind in common:
        p_fixed = fx[(level, kind)].position
        if D is not None:
            mapped = total_transform_point(A, D, p_fixed)[0]
        else:
            mapped = A.inverse().apply_to_points(p_fixed)[0]
        err = float(np.linalg.norm(mapped - mv[(level, kind)].position))
        per_landmark.append({"level": level, "kind": kind, "error_mm": err})
    per_vertebra = {}
    for level in sorted({e["level"] for e in per_landmark}):
        errs = [e["error_mm"] for e in per_landmark if e["level"] == level]
        per_vertebra[level] = float(np.mean(errs))
    patient_mean = float(np.mean(list(per_vertebra.values())))
    return TreReport(patient=patient, per_landmark=per_landmark,
                     per_vertebra=per_vertebra, patient_mean=patient_mean,
                     unmatched=unmatched)


def cohort_tre(reports: list[TreReport]) -> dict:
    """Cohort mean +- sd across patient means (not pooled landmarks)."""
    means = [r.patient_mean for r in reports]
    return {"mean_mm": float(np.mean(means)),
            "sd_mm": float(np.std(means, ddof=1)) if len(means) > 1 else 0.0,
            "n_patients": len(means)}


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------

STAGES = ("segmentation-ingest", "fusion", "affine", "deformable", "meshing")


class TimingReport:
    """Wall-clock seconds per pipeline stage."""

    def __init__(self):
        self.stages: dict[str, float] = {}
        self._t0 = time.perf_counter()

    class _StageTimer:
        def __init__(self, report, name):
            self.report, self.name = report, name

        def __enter__(self):
            self._start = time.perf_counter()
            return self

        def __exit__(self, *exc):
            self.report.stages[self.name] = \
                self.report.stages.get(self.name, 0.0) + time.perf_counter() - self._start

    def stage(self, name: str) -> "_StageTimer":
        return self._StageTimer(self, name)

    @property
    def total(self) -> float:
        return time.perf_counter() - self._t0

    def to_json(self) -> dict:
        out = {k: round(v, 4) for k, v in self.stages.items()}
        out["total"] = round(self.total, 4)
        return out


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

REPORT_SCHEMA_VERSION = 1


def emit_report(metrics: dict, timings: TimingReport | dict | None, path: str,
                csv_path: str | None = None) -> dict:
    """Write the evaluation report as JSON plus a flat CSV of TRE leaves."""
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "metrics": metrics or {},
        "timings": (timings.to_json() if isinstance(timings, TimingReport)
                    else (timings or {})),
        "reference_values": REFERENCE_VALUES,
    }
    try:
        with open(path, "w") as f:
            json.dump(doc, f, indent=1)
    except OSError as e:
        raise VolumeError(f"cannot write report {path}: {e}") from e
    csv_path = csv_path or path.rsplit(".json", 1)[0] + ".csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["patient", "vertebra", "kind", "error_mm"])
        for rep in (metrics or {}).get("tre", {}).get("patients", []):
            for e in rep.get("per_landmark", []):
                w.writerow([rep["patient"], e["vertebra"], e["kind"],
                            f"{e['error_mm']:.6f}"])
    return doc
