"""HTTP + websocket service: case upload, pipeline jobs, artifact and slice
serving, and interactive rehearsal sessions.

Protocol: JSON text frames.  Every client message carrying ``seq`` is
answered exactly once, in order, by an ``ack`` or a ``carve_result`` with
the same seq.  Alarm messages are emitted only when the alarm level
changes.  Chunk geometry rides base64-encoded inside JSON.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import tempfile
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, UploadFile, WebSocket, WebSocketDisconnect
from fastapi.responses import FileResponse, JSONResponse, Response

from . import deform as dm
from .meshing import TriangleMesh, load_palette
from .pipeline import run_pipeline
from .sim import CarveCommand, SimConfig, SimSession, Tool, create_session
from .volume import LabelMap, Volume, load_labelmap, load_volume, structure_name

log = logging.getLogger(__name__)

REQUIRED_UPLOADS = ("ct", "mri", "ct_seg", "mri_seg")
OPTIONAL_UPLOADS = ("ct_seg_secondary", "landmarks_fixed", "landmarks_moving")
OVERLAY_ALPHA = 0.4


@dataclass
class CaseRecord:
    case_id: str
    case_dir: str
    out_dir: str
    status: str = "pending"             # pending | running | done | failed
    job_id: str | None = None

    def artifacts(self) -> dict:
        names = ("fused_seg.nii.gz", "field.nii.gz", "model.glb",
                 "report.json", "mri_warped.nii.gz", "model_seg.nii.gz")
        return {n: os.path.exists(os.path.join(self.out_dir, n)) for n in names}


@dataclass
class JobRecord:
    job_id: str
    case_id: str
    status: str = "pending"             # pending | running | done | failed | cancelled
    stage: str | None = None
    error: str | None = None
    report: dict | None = None
    cancel: threading.Event = field(default_factory=threading.Event)


class ServiceState:
    def __init__(self, work_dir: str | None = None, workers: int | None = None):
        self.work_dir = work_dir or tempfile.mkdtemp(prefix="spinesim-")
        os.makedirs(self.work_dir, exist_ok=True)
        if workers is None:
            workers = max(1, (os.cpu_count() or 2) // 2)
        self.pool = ThreadPoolExecutor(max_workers=workers)
        self.cases: dict[str, CaseRecord] = {}
        self.jobs: dict[str, JobRecord] = {}
        self.lock = threading.Lock()


# ---------------------------------------------------------------------------
# Slice rendering
# ---------------------------------------------------------------------------

_AXES = {"sagittal": 0, "coronal": 1, "axial": 2, "0": 0, "1": 1, "2": 2}


def render_slice_png(vol: Volume, axis: int, index: int,
                     labels: LabelMap | None = None) -> bytes:
    """Window the plane to its own min/max and blend the label overlay at a
    fixed alpha."""
    from PIL import Image

    plane = np.take(vol.data, index, axis=axis).astype(np.float64)
    lo, hi = plane.min(), plane.max()
    gray = np.zeros_like(plane) if hi <= lo else (plane - lo) / (hi - lo)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    if labels is not None:
        pal = load_palette()
        lab = np.take(labels.data, index, axis=axis)
        for l in np.unique(lab):
            if l == 0:
                continue
            try:
                name = structure_name(int(l))
            except Exception:
                name = "default"
            if name.startswith("disc_"):
                name = "disc"
            elif name not in pal and (name == "sacrum" or name[0] in "CTL"):
                name = "vertebra"
            color = np.asarray(pal.get(name, pal["default"])[:3])
            m = lab == l
            rgb[m] = (1 - OVERLAY_ALPHA) * rgb[m] + OVERLAY_ALPHA * color
    img = Image.fromarray((np.clip(rgb, 0, 1) * 255).astype(np.uint8)
                          .transpose(1, 0, 2)[::-1])
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Session message handling
# ---------------------------------------------------------------------------

def _b64(arr: np.ndarray, dtype) -> str:
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype=dtype).tobytes()).decode("ascii")


def mesh_patches(session: SimSession, keys) -> list[dict]:
    """Chunk geometry for incremental client update."""
    patches = []
    for key in keys:
        structures = []
        for label, mesh in sorted(session.chunk_mesh(tuple(key)).items()):
            structures.append({
                "structure": int(label),
                "name": session.label_table.get(int(label))
                        or structure_name(int(label)),
                "color": [float(c) for c in mesh.color],
                "vertex_count": int(len(mesh.vertices)),
                "positions_b64": _b64(mesh.vertices, np.float32),
                "indices_b64": _b64(mesh.triangles.ravel(), np.uint32),
            })
        patches.append({"chunk": [int(k) for k in key], "structures": structures})
    return patches


def scene_checksum(session: SimSession) -> str:
    """Canonical digest of every non-empty chunk's geometry.

    Clients mirroring chunk patches can recompute the identical digest:
    chunks in numeric key order, structures ascending, one line per
    structure with the base64 payloads, sha256 over UTF-8.
    """
    lines = []
    for key in sorted(session.all_chunk_keys()):
        meshes = session.chunk_mesh(key)
        for label in sorted(meshes):
            m = meshes[label]
            if len(m.triangles) == 0:
                continue
            lines.append(
                f"chunk={key[0]},{key[1]},{key[2]};structure={int(label)};"
                f"positions={_b64(m.vertices, np.float32)};"
                f"indices={_b64(m.triangles.ravel(), np.uint32)}")
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


class SessionProtocol:
    """Serialized handling of one rehearsal session's messages.

    Transport-agnostic: ``handle`` maps one inbound message to the ordered
    list of outbound messages, so the websocket endpoint and tests share
    the exact same logic.
    """

    def __init__(self, session: SimSession):
        self.session = session
        self.tool = Tool(kind="burr")
        self.last_alarm_level = "none"

    def handle(self, msg: dict) -> list[dict]:
        try:
            mtype = msg.get("type")
            seq = msg.get("seq")
            handler = getattr(self, f"_on_{mtype}", None)
            if handler is None:
                return [{"type": "error", "seq": seq,
                         "message": f"unknown message type {mtype!r}"}]
            return handler(msg, seq)
        except Exception as e:
            log.exception("session message failed")
            return [{"type": "error", "seq": msg.get("seq"), "message": str(e)}]

    # -- client -> server messages ------------------------------------------

    def _on_tool_select(self, msg, seq):
        t = msg.get("tool", {})
        self.tool = Tool(kind=t.get("kind", "burr"),
                         radius_mm=float(t.get("radius_mm", 3.0)),
                         bite_mm=tuple(t.get("bite_mm", (4.0, 6.0, 3.0))))
        return [{"type": "ack", "seq": seq,
                 "tool": {"kind": self.tool.kind,
                          "radius_mm": self.tool.radius_mm,
                          "bite_mm": list(self.tool.bite_mm)}}]

    def _on_tool_pose(self, msg, seq):
        alarm = self.session.proximity(msg["tip_mm"])
        out = [{"type": "ack", "seq": seq, "alarm": alarm.to_json()}]
        out.extend(self._alarm_transition(alarm))
        return out

    def _on_carve(self, msg, seq):
        doc = dict(msg)
        doc.setdefault("seq", seq)
        if "tool" not in doc:
            doc["tool"] = {"kind": self.tool.kind,
                           "radius_mm": self.tool.radius_mm,
                           "bite_mm": list(self.tool.bite_mm)}
        cmd = CarveCommand.from_json(doc)
        res = self.session.apply_carve(cmd)
        out = [{
            "type": "carve_result",
            "seq": res.seq,
            "applied": res.applied,
            "violation": res.violation,
            "removed": {str(k): v for k, v in sorted(res.removed.items())},
            "alarm": res.alarm.to_json(),
            "patches": mesh_patches(self.session, res.dirty_chunks),
        }]
        out.extend(self._alarm_transition(res.alarm))
        return out

    def _on_undo(self, msg, seq):
        dirty = self.session.undo()
        return [{"type": "ack", "seq": seq, "undone": bool(dirty),
                 "patches": mesh_patches(self.session, dirty)}]

    def _on_visibility(self, msg, seq):
        vis = self.session._visibility
        for name, on in (msg.get("structures") or {}).items():
            if name in vis:
                vis[name] = bool(on)
        return [{"type": "ack", "seq": seq, "structures": dict(vis)}]

    def _on_isolate(self, msg, seq):
        out = self.session.isolate_spine(bool(msg.get("on", True)))
        return [{"type": "ack", "seq": seq, **out}]

    def _on_exposure(self, msg, seq):
        out = self.session.auto_exposure([int(l) for l in msg.get("levels", [])])
        return [{"type": "ack", "seq": seq, **out}]

    def _on_scene(self, msg, seq):
        keys = [k for k in self.session.all_chunk_keys()
                if self.session.chunk_mesh(k)]
        return [{"type": "ack", "seq": seq,
                 "patches": mesh_patches(self.session, keys)}]

    def _on_scene_checksum(self, msg, seq):
        return [{"type": "ack", "seq": seq,
                 "scene_sha256": scene_checksum(self.session)}]

    def _on_report(self, msg, seq):
        rep = self.session.decompression_report()
        rep["grid_sha256"] = self.session.grid_checksum()
        return [{"type": "report", "seq": seq, **rep}]

    # -- alarm edge detection --------------------------------------------------

    def _alarm_transition(self, alarm) -> list[dict]:
        if alarm.level != self.last_alarm_level:
            self.last_alarm_level = alarm.level
            return [{"type": "alarm", **alarm.to_json()}]
        return []


# ---------------------------------------------------------------------------
# Application factory
# ---------------------------------------------------------------------------

def create_app(work_dir: str | None = None, workers: int | None = None,
               preload: list[str] | None = None) -> FastAPI:
    state = ServiceState(work_dir=work_dir, workers=workers)
    app = FastAPI(title="spinesim service")
    app.state.service = state

    # register already-materialized cases: each dir holds case/ inputs and
    # (optionally) out/ artifacts from a previous pipeline run
    for root in preload or []:
        case_id = os.path.basename(os.path.normpath(root))
        case_dir = os.path.join(root, "case")
        out_dir = os.path.join(root, "out")
        os.makedirs(out_dir, exist_ok=True)
        done = os.path.exists(os.path.join(out_dir, "model_seg.nii.gz"))
        state.cases[case_id] = CaseRecord(
            case_id=case_id, case_dir=case_dir, out_dir=out_dir,
            status="done" if done else "pending")
        log.info("preloaded case %s (status %s)", case_id,
                 state.cases[case_id].status)

    def _case(case_id: str) -> CaseRecord:
        rec = state.cases.get(case_id)
        if rec is None:
            raise HTTPException(404, f"unknown case {case_id}")
        return rec

    # -- cases ----------------------------------------------------------------

    @app.post("/cases", status_code=201)
    async def create_case(ct: UploadFile, mri: UploadFile,
                          ct_seg: UploadFile, mri_seg: UploadFile,
                          ct_seg_secondary: UploadFile | None = None,
                          landmarks_fixed: UploadFile | None = None,
                          landmarks_moving: UploadFile | None = None):
        case_id = uuid.uuid4().hex[:12]
        case_dir = os.path.join(state.work_dir, case_id, "case")
        out_dir = os.path.join(state.work_dir, case_id, "out")
        os.makedirs(case_dir, exist_ok=True)
        os.makedirs(out_dir, exist_ok=True)
        uploads = {"ct": ct, "mri": mri, "ct_seg": ct_seg, "mri_seg": mri_seg,
                   "ct_seg_secondary": ct_seg_secondary,
                   "landmarks_fixed": landmarks_fixed,
                   "landmarks_moving": landmarks_moving}
        for name, up in uploads.items():
            if up is None:
                continue
            suffix = ".json" if name.startswith("landmarks") else ".nii.gz"
            with open(os.path.join(case_dir, name + suffix), "wb") as f:
                f.write(await up.read())
        # validate geometry before accepting
        try:
            for name in ("ct", "mri"):
                load_volume(os.path.join(case_dir, name + ".nii.gz"))
            for name in ("ct_seg", "mri_seg"):
                load_labelmap(os.path.join(case_dir, name + ".nii.gz"))
        except Exception as e:
            raise HTTPException(400, f"invalid case files: {e}") from e
        state.cases[case_id] = CaseRecord(case_id=case_id, case_dir=case_dir,
                                          out_dir=out_dir)
        return {"case_id": case_id}

    @app.get("/cases/{case_id}")
    def get_case(case_id: str):
        rec = _case(case_id)
        return {"case_id": rec.case_id, "status": rec.status,
                "job_id": rec.job_id, "artifacts": rec.artifacts()}

    # -- pipeline jobs -----------------------------------------------------------

    @app.post("/cases/{case_id}/pipeline", status_code=202)
    def start_pipeline(case_id: str, iterations: int = 250,
                       lam: float = 0.02, stride: int = 4):
        rec = _case(case_id)
        with state.lock:
            if rec.job_id and state.jobs[rec.job_id].status in ("pending", "running"):
                raise HTTPException(409, "pipeline already running for this case")
            job = JobRecord(job_id=uuid.uuid4().hex[:12], case_id=case_id)
            state.jobs[job.job_id] = job
            rec.job_id = job.job_id
            rec.status = "pending"

        def progress(stage):
            job.stage = stage
            if job.cancel.is_set():
                raise RuntimeError("job cancelled")

        def run():
            job.status = rec.status = "running"
            try:
                cfg = dm.RegConfig(iterations=iterations, lam=lam, stride=stride)
                job.report = run_pipeline(rec.case_dir, rec.out_dir, cfg=cfg,
                                          progress=progress)
                job.status = rec.status = "done"
            except Exception as e:
                if job.cancel.is_set():
                    job.status, rec.status = "cancelled", "pending"
                else:
                    job.status, rec.status = "failed", "failed"
                job.error = f"[{job.stage}] {e}"
                log.exception("pipeline job %s failed", job.job_id)

        state.pool.submit(run)
        return {"job_id": job.job_id}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id}")
        out = {"job_id": job.job_id, "case_id": job.case_id,
               "status": job.status, "stage": job.stage, "error": job.error}
        if job.report:
            out["timings"] = job.report.get("timings")
            out["metrics"] = job.report.get("metrics")
        return out

    @app.delete("/jobs/{job_id}")
    def cancel_job(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id}")
        job.cancel.set()
        return {"job_id": job_id, "cancel_requested": True}

    # -- artifacts -----------------------------------------------------------------

    def _artifact(case_id: str, name: str, media_type: str):
        rec = _case(case_id)
        path = os.path.join(rec.out_dir, name)
        if not os.path.exists(path):
            raise HTTPException(404, f"{name} not available (pipeline not done)")
        return FileResponse(path, media_type=media_type)

    @app.get("/cases/{case_id}/model.glb")
    def get_model(case_id: str):
        return _artifact(case_id, "model.glb", "model/gltf-binary")

    @app.get("/cases/{case_id}/report.json")
    def get_report(case_id: str):
        return _artifact(case_id, "report.json", "application/json")

    @app.get("/cases/{case_id}/slices")
    def get_slice(case_id: str, axis: str = "axial", index: int = 0,
                  volume: str = "ct", overlay: bool = False):
        rec = _case(case_id)
        if axis not in _AXES:
            raise HTTPException(400, f"axis must be one of {sorted(set(_AXES))}")
        ax = _AXES[axis]
        if volume == "ct":
            path = os.path.join(rec.case_dir, "ct.nii.gz")
        elif volume == "mri":
            # MRI is always served in registered (CT) space
            path = os.path.join(rec.out_dir, "mri_warped.nii.gz")
        else:
            raise HTTPException(400, "volume must be 'ct' or 'mri'")
        if not os.path.exists(path):
            raise HTTPException(404, f"{volume} volume not available")
        vol = load_volume(path)
        if not (0 <= index < vol.data.shape[ax]):
            raise HTTPException(400, f"index {index} out of range "
                                     f"[0, {vol.data.shape[ax]})")
        labels = None
        if overlay:
            seg_path = os.path.join(rec.out_dir, "model_seg.nii.gz")
            if not os.path.exists(seg_path):
                seg_path = os.path.join(rec.case_dir, "ct_seg.nii.gz")
            labels = load_labelmap(seg_path)
        png = render_slice_png(vol, ax, index, labels)
        return Response(content=png, media_type="image/png")

    # -- rehearsal session ------------------------------------------------------------

    @app.websocket("/cases/{case_id}/session")
    async def session_ws(ws: WebSocket, case_id: str):
        rec = state.cases.get(case_id)
        model_path = rec and os.path.join(rec.out_dir, "model_seg.nii.gz")
        if not rec or not os.path.exists(model_path):
            await ws.close(code=4004)
            return
        await ws.accept()
        session = create_session(load_labelmap(model_path))
        proto = SessionProtocol(session)
        try:
            while True:
                raw = await ws.receive_text()
                try:
                    msg = json.loads(raw)
                except json.JSONDecodeError as e:
                    await ws.send_text(json.dumps(
                        {"type": "error", "seq": None,
                         "message": f"malformed JSON: {e}"}))
                    continue
                for out in proto.handle(msg):
                    await ws.send_text(json.dumps(out))
        except WebSocketDisconnect:
            pass

    return app
