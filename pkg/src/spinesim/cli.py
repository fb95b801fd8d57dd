"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/input error, 3 internal error.
Options can be preloaded from a key=value config file (--config); explicit
flags win over file values.  Set NO_COLOR to suppress ANSI styling.
DATA_ROOT, when set, is the base directory for relative data paths.
"""

from __future__ import annotations

import json
import logging
import os
import sys

import click
import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

log = logging.getLogger(__name__)


def _data_errors():
    from .affine import RegistrationError
    from .deform import DeformError
    from .meshing import MeshError
    from .pipeline import PipelineError
    from .sim import SimError
    from .volume import VolumeError
    return (VolumeError, RegistrationError, DeformError, MeshError,
            PipelineError, SimError, FileNotFoundError, json.JSONDecodeError)


def _resolve(path: str | None) -> str | None:
    """Apply DATA_ROOT to relative paths."""
    if path is None:
        return None
    root = os.environ.get("DATA_ROOT")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _load_config_file(path: str) -> dict:
    """key=value lines; '#' comments and blank lines ignored."""
    out = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise click.UsageError(f"{path}:{ln}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip().replace("-", "_")] = v.strip()
    return out


class _ConfigGroup(click.Group):
    """Group that folds --config file values in as parameter defaults."""

    def invoke(self, ctx):
        cfg_path = ctx.params.get("config")
        if cfg_path:
            ctx.default_map = dict(ctx.default_map or {})
            values = _load_config_file(cfg_path)
            for cmd in self.commands:
                sub = dict(values)
                sub.update((ctx.default_map.get(cmd) or {}))
                ctx.default_map[cmd] = sub
        return super().invoke(ctx)


def _echo(payload: dict, as_json: bool):
    if as_json:
        click.echo(json.dumps(payload, indent=1, sort_keys=True))
    else:
        for k, v in payload.items():
            click.echo(f"{k}: {v}")


def _style(text: str, **kw) -> str:
    if os.environ.get("NO_COLOR"):
        return text
    return click.style(text, **kw)


@click.group(cls=_ConfigGroup, context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", type=click.Path(exists=True, dir_okay=False),
              help="key=value defaults file; explicit flags win.")
@click.option("-v", "--verbose", is_flag=True, help="debug logging")
def cli(config, verbose):
    """Spine model generation and rehearsal toolkit."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# fuse
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--primary", required=True, help="primary label map (NIfTI)")
@click.option("--secondary", required=True, help="secondary label map (NIfTI)")
@click.option("--out", "out_path", required=True, help="fused output path")
@click.option("--largest-component/--no-largest-component", "lcc", default=True,
              help="keep only the largest connected component per vertebra")
@click.option("--json", "as_json", is_flag=True, help="machine-readable output")
def fuse(primary, secondary, out_path, lcc, as_json):
    """Union two segmentations; primary wins on overlap."""
    from .fusion import fuse_union, largest_component
    from .volume import VERTEBRA_LABELS, load_labelmap, save_volume

    fused = fuse_union(load_labelmap(_resolve(primary)),
                       load_labelmap(_resolve(secondary)))
    if lcc:
        for label in fused.labels_present():
            if label in VERTEBRA_LABELS:
                fused = largest_component(fused, label)
    save_volume(fused, _resolve(out_path))
    _echo({"out": out_path, "labels": fused.labels_present()}, as_json)


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--fixed", required=True, help="fixed intensity volume (CT)")
@click.option("--moving", required=True, help="moving intensity volume (MRI)")
@click.option("--fixed-seg", required=True, help="fixed label map")
@click.option("--moving-seg", required=True, help="moving label map")
@click.option("--out-dir", required=True)
@click.option("--iterations", type=int, default=250, show_default=True)
@click.option("--lam", type=float, default=0.02, show_default=True,
              help="regularizer weight")
@click.option("--stride", type=int, default=4, show_default=True,
              help="control grid spacing in voxels")
@click.option("--json", "as_json", is_flag=True)
def register(fixed, moving, fixed_seg, moving_seg, out_dir, iterations, lam,
             stride, as_json):
    """Two-stage registration: centroid similarity, then deformable."""
    from . import deform as dm
    from .affine import estimate_similarity, pair_by_level
    from .fusion import label_centroids
    from .volume import VERTEBRA_LABELS, load_labelmap, load_volume, save_volume

    out_dir = _resolve(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    fseg = load_labelmap(_resolve(fixed_seg))
    mseg = load_labelmap(_resolve(moving_seg))
    vert = sorted(set(fseg.labels_present()) & set(mseg.labels_present())
                  & VERTEBRA_LABELS)
    fc, _ = label_centroids(fseg, vert)
    mc, _ = label_centroids(mseg, vert)
    A = estimate_similarity(pair_by_level(mc, fc))
    A.save(os.path.join(out_dir, "affine.json"))

    cfg = dm.RegConfig(iterations=iterations, lam=lam, stride=stride)
    fvol, mvol = load_volume(_resolve(fixed)), load_volume(_resolve(moving))
    D, trace = dm.register_deformable(fvol, mvol, A, cfg)
    dm.save_field(D, os.path.join(out_dir, "field.nii.gz"),
                  lam=lam, iterations=iterations)
    dm.write_trace_csv(trace, os.path.join(out_dir, "trace.csv"))
    save_volume(dm.warp(mvol, A, D), os.path.join(out_dir, "mri_warped.nii.gz"))
    _echo({"out_dir": out_dir, "final_loss": trace[-1].L,
           "affine_scale": A.scale}, as_json)


# ---------------------------------------------------------------------------
# mesh
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--labels", "labels_path", required=True, help="label map (NIfTI)")
@click.option("--out", "out_path", required=True, help="output .glb path")
@click.option("--smooth-iterations", type=int, default=10, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def mesh(labels_path, out_path, smooth_iterations, as_json):
    """Extract one triangle mesh per structure and export glTF binary."""
    from .meshing import build_scene, export_gltf
    from .volume import load_labelmap

    lm = load_labelmap(_resolve(labels_path))
    scene = build_scene(lm, smooth_iterations=smooth_iterations)
    export_gltf(scene, _resolve(out_path))
    _echo({"out": out_path,
           "structures": {str(k): len(m.triangles)
                          for k, m in scene.meshes.items()}}, as_json)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--fixed-seg", required=True)
@click.option("--warped-seg", required=True, help="moving labels after registration")
@click.option("--fixed-landmarks", default=None)
@click.option("--moving-landmarks", default=None)
@click.option("--affine", "affine_path", default=None, help="affine.json")
@click.option("--field", "field_path", default=None, help="field.nii.gz")
@click.option("--report", "report_path", required=True, help="report.json output")
@click.option("--figures/--no-figures", default=True,
              help="render metric figures next to the report")
@click.option("--json", "as_json", is_flag=True)
def evaluate(fixed_seg, warped_seg, fixed_landmarks, moving_landmarks,
             affine_path, field_path, report_path, figures, as_json):
    """Overlap (DSC) and landmark (TRE) metrics with CSV/JSON report."""
    from .affine import SimilarityTransform
    from .deform import load_field
    from .metrics import cohort_tre, dice, emit_report, load_landmarks, tre
    from .volume import load_labelmap, structure_name

    a = load_labelmap(_resolve(fixed_seg))
    b = load_labelmap(_resolve(warped_seg))
    metrics = {"dsc": {}, "tre": {}}
    for label in sorted(set(a.labels_present()) & set(b.labels_present())):
        metrics["dsc"][structure_name(label)] = dice(a, b, label)
    if fixed_landmarks and moving_landmarks:
        if not affine_path:
            raise click.UsageError("--affine is required with landmarks")
        A = SimilarityTransform.load(_resolve(affine_path))
        D = load_field(_resolve(field_path)) if field_path else None
        rep = tre(load_landmarks(_resolve(fixed_landmarks)),
                  load_landmarks(_resolve(moving_landmarks)), A, D)
        metrics["tre"] = {"patients": [rep.to_json()],
                          "cohort": cohort_tre([rep])}
    report_path = _resolve(report_path)
    doc = emit_report(metrics, None, report_path)
    if figures:
        _render_eval_figures(metrics, os.path.dirname(report_path) or ".")
    _echo(doc["metrics"] if as_json else
          {"report": report_path,
           "dsc_mean": (float(np.mean(list(metrics["dsc"].values())))
                        if metrics["dsc"] else None)}, as_json)


def _render_eval_figures(metrics: dict, out_dir: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if metrics.get("dsc"):
        fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(metrics["dsc"])), 4))
        names = sorted(metrics["dsc"])
        ax.bar(names, [metrics["dsc"][n] for n in names], color="tab:green")
        ax.set_ylabel("DSC")
        ax.set_ylim(0, 1)
        plt.setp(ax.get_xticklabels(), rotation=45, ha="right")
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "dsc.png"), dpi=110)
        plt.close(fig)
    patients = metrics.get("tre", {}).get("patients") or []
    if patients:
        per_vert = patients[0]["per_vertebra"]
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.bar(list(per_vert), list(per_vert.values()), color="tab:blue")
        ax.set_ylabel("TRE (mm)")
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "tre.png"), dpi=110)
        plt.close(fig)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@cli.command(name="pipeline")
@click.option("--case-dir", required=True, help="directory with case files")
@click.option("--out-dir", required=True)
@click.option("--iterations", type=int, default=250, show_default=True)
@click.option("--lam", type=float, default=0.02, show_default=True)
@click.option("--stride", type=int, default=4, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def pipeline_cmd(case_dir, out_dir, iterations, lam, stride, as_json):
    """Full run: ingest, fuse, register, merge, mesh, evaluate."""
    from . import deform as dm
    from .pipeline import run_pipeline

    cfg = dm.RegConfig(iterations=iterations, lam=lam, stride=stride)
    report = run_pipeline(_resolve(case_dir), _resolve(out_dir), cfg=cfg,
                          progress=lambda s: click.echo(
                              _style(f"stage: {s}", fg="cyan"), err=True))
    if as_json:
        _echo(report, True)
    else:
        t = report["timings"]
        _echo({"out_dir": out_dir, "total_s": t.get("total"),
               **{f"{k}_s": v for k, v in t.items() if k != "total"}}, False)


# ---------------------------------------------------------------------------
# carve-replay
# ---------------------------------------------------------------------------

@cli.command(name="carve-replay")
@click.option("--model", "model_path", required=True, help="merged label map")
@click.option("--script", "script_path", required=True,
              help="JSON list of carve commands")
@click.option("--out", "out_path", default=None,
              help="write final accounting JSON here as well")
@click.option("--warn-mm", type=float, default=3.0, show_default=True)
@click.option("--danger-mm", type=float, default=1.0, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def carve_replay(model_path, script_path, out_path, warn_mm, danger_mm, as_json):
    """Replay a recorded carve script headlessly; print the accounting."""
    from .sim import SimConfig, create_session, load_carve_script, replay_script
    from .volume import load_labelmap

    session = create_session(load_labelmap(_resolve(model_path)),
                             SimConfig(warn_mm=warn_mm, danger_mm=danger_mm))
    result = replay_script(session, load_carve_script(_resolve(script_path)))
    if out_path:
        with open(_resolve(out_path), "w") as f:
            json.dump(result, f, indent=1, sort_keys=True)
    _echo(result, as_json)


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--out-dir", required=True)
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--deform-amp", type=float, default=5.0, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def phantom(out_dir, size, deform_amp, seed, as_json):
    """Generate a synthetic test case with known ground truth."""
    from .phantom import PhantomCase

    case = PhantomCase(size=size, deform_amp=deform_amp, seed=seed)
    paths = case.write(_resolve(out_dir))
    _echo({"out_dir": out_dir,
           "initial_landmark_error_mm": case.initial_landmark_error(),
           "files": sorted(os.path.basename(p) for p in paths.values())},
          as_json)


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8080, show_default=True)
@click.option("--work-dir", default=None,
              help="case/job storage root (default: temp directory)")
@click.option("--preload", multiple=True,
              help="register an existing case directory (repeatable); the "
                   "directory name becomes the case id")
def serve(host, port, work_dir, preload):
    """Run the HTTP + websocket rehearsal service."""
    import uvicorn

    from .service import create_app

    app = create_app(work_dir=_resolve(work_dir),
                     preload=[_resolve(p) for p in preload])
    uvicorn.run(app, host=host, port=port, log_level="info")


# ---------------------------------------------------------------------------
# entry point with the exit-code contract
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Exit as e:
        return EXIT_OK if e.exit_code == 0 else EXIT_USAGE
    except (click.UsageError, click.BadParameter) as e:
        click.echo(_style(f"usage error: {e.format_message()}", fg="red"), err=True)
        return EXIT_USAGE
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except _data_errors() as e:
        click.echo(_style(f"data error: {e}", fg="red"), err=True)
        return EXIT_DATA
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
