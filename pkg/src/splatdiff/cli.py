"""Command line entry point: ``splatdiff {detect,synth,eval,sweep}``.

Failures exit with status 1 and print a single JSON line
``{"error": <type>, "message": <text>}`` on stderr. Usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, splat_io
from .errors import SplatDiffError
from .pipeline import PipelineConfig, detect
from .scene_model import GaussianScene, activate_table
from .synth import CHANGE_KINDS, SynthSpec, generate_pair

logger = logging.getLogger("splatdiff")

MAP_FILES = {  # file prefix -> (ChangeMaps attribute, writer)
    "change": ("M", splat_io.write_change_map),
    "M1": ("M1", splat_io.write_change_map),
    "M2": ("M2", splat_io.write_change_map),
    "struct": ("M_struct", splat_io.write_change_map),
    "surf": ("M_surf", splat_io.write_change_map),
    "binary": ("binary", splat_io.write_binary_map),
    "labels": ("labels", splat_io.write_label_map),
}


class _Failure(Exception):
    pass


def _add_config_flags(p):
    d = PipelineConfig()
    p.add_argument("--eta", type=float, default=d.eta, help="neighbour ball radius in effective std devs")
    p.add_argument("--geo-quantile", type=float, default=d.geo_quantile)
    p.add_argument("--color-quantile", type=float, default=d.color_quantile)
    p.add_argument("--conf-quantile", type=float, default=d.conf_quantile)
    p.add_argument("--threshold", type=float, default=d.threshold)
    p.add_argument("--z-near", type=float, default=d.z_near)
    p.add_argument("--z-far", type=float, default=d.z_far)
    p.add_argument("--min-opacity", type=float, default=d.min_opacity)
    p.add_argument("--eps-color", type=float, default=d.eps_color, help="floor on the colour bandwidth")
    p.add_argument("--weighted-color-median", action="store_true",
                   help="kernel-weighted median for the colour bandwidth")
    p.add_argument("--render-size", type=int, nargs=2, metavar=("W", "H"), default=None,
                   help="render every view at this resolution (intrinsics rescaled)")
    p.add_argument("--threads", type=int, default=1)


def _config(args) -> PipelineConfig:
    return PipelineConfig(
        eta=args.eta, geo_quantile=args.geo_quantile, color_quantile=args.color_quantile,
        conf_quantile=args.conf_quantile, threshold=args.threshold, z_near=args.z_near, z_far=args.z_far,
        min_opacity=args.min_opacity, eps_color=args.eps_color,
        weighted_color_median=args.weighted_color_median,
        render_size=tuple(args.render_size) if args.render_size else None, workers=args.threads,
    )


def _load_scene(ply, poses) -> GaussianScene:
    return activate_table(splat_io.parse_splat_ply(ply), splat_io.parse_cameras(poses))


def write_maps(maps: dict, out: Path):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for vid, cm in sorted(maps.items()):
        for prefix, (attr, writer) in MAP_FILES.items():
            writer(getattr(cm, attr), out / f"{prefix}_{vid}.png")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


def _write_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=1, default=_json_default) + "\n")


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------


def cmd_detect(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"status": "running", "inputs": {
        "scene1": str(args.scene1), "scene2": str(args.scene2),
        "poses1": str(args.poses1), "poses2": str(args.poses2),
        "views": str(args.views) if args.views else None,
    }}
    t0 = time.perf_counter()
    try:
        cfg = _config(args)
        s1 = _load_scene(args.scene1, args.poses1)
        s2 = _load_scene(args.scene2, args.poses2)
        views = splat_io.parse_cameras(args.views) if args.views else None
        result = detect(s1, s2, views, cfg, manifest=manifest)
        for k, st in enumerate(result.states, start=1):
            splat_io.write_score_table(st.scores, out / f"scores_scene{k}.csv")
        write_maps(result.maps, out)
    except Exception as exc:
        manifest["status"] = "failed"
        manifest["error"] = {"type": type(exc).__name__, "message": str(exc)}
        _write_json(manifest, out / "manifest.json")
        raise
    manifest["status"] = "ok"
    manifest["timing_s"]["total"] = time.perf_counter() - t0
    _write_json(manifest, out / "manifest.json")
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _synth_spec(args) -> SynthSpec:
    if args.spec:
        return SynthSpec.from_json(Path(args.spec).read_text())
    change = None if args.change == "none" else args.change
    return SynthSpec.moderate(args.seed, change)


def write_synth(spec: SynthSpec, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    s1, s2, truth = generate_pair(spec)
    splat_io.write_splat_ply(truth.table1, out / "scene1.ply")
    splat_io.write_splat_ply(truth.table2, out / "scene2.ply")
    splat_io.cameras_to_json(s1.cameras, out / "poses1.json")
    splat_io.cameras_to_json(s2.cameras, out / "poses2.json")
    for vid in sorted(truth.gt_binary):
        splat_io.write_binary_map(truth.gt_binary[vid], out / f"gt_binary_{vid}.png")
        splat_io.write_label_map(truth.gt_labels[vid], out / f"gt_labels_{vid}.png")
    _write_json({
        "spec": spec.to_dict(),
        "kind1": truth.kind1, "kind2": truth.kind2,
        "surface1": truth.surface1, "surface2": truth.surface2,
    }, out / "truth.json")
    return s1, s2, truth


def cmd_synth(args) -> int:
    write_synth(_synth_spec(args), Path(args.out))
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

_VIEW_RE = re.compile(r"^(?:gt_)?binary_(\d+)\.png$")


def _view_ids(directory: Path, gt: bool):
    prefix = "gt_binary_" if gt else "binary_"
    ids = []
    for p in directory.iterdir():
        m = _VIEW_RE.match(p.name)
        if m and p.name.startswith(prefix):
            ids.append(int(m.group(1)))
    return sorted(ids)


def evaluate_dirs(pred: Path, gt: Path) -> dict:
    ids = _view_ids(gt, gt=True)
    if not ids:
        raise _Failure(f"no gt_binary_<id>.png files in {gt}")
    missing = [i for i in ids if not (pred / f"binary_{i}.png").exists()]
    if missing:
        raise _Failure(f"prediction lacks views {missing}")
    pb = {i: splat_io.read_binary_map(pred / f"binary_{i}.png") for i in ids}
    gb = {i: splat_io.read_binary_map(gt / f"gt_binary_{i}.png") for i in ids}
    threshold = None
    if (pred / "manifest.json").exists():
        threshold = json.loads((pred / "manifest.json").read_text()).get("config", {}).get("threshold")
    res = {"views": ids, "fixed": evaluation.detection_metrics(pb, gb, threshold_used=threshold).to_dict()}
    if all((pred / f"change_{i}.png").exists() for i in ids):
        maps = {i: splat_io.read_change_map(pred / f"change_{i}.png") for i in ids}
        t, orc = evaluation.oracle_threshold(maps, gb)
        res["oracle"] = orc.to_dict()
    if all((pred / f"labels_{i}.png").exists() and (gt / f"gt_labels_{i}.png").exists() for i in ids):
        pl = {i: splat_io.read_label_map(pred / f"labels_{i}.png") for i in ids}
        gl = {i: splat_io.read_label_map(gt / f"gt_labels_{i}.png") for i in ids}
        res["routing"] = {c: evaluation.routing_metrics(pl, gl, c).to_dict() for c in ("both", "gt")}
    truth_path = gt / "truth.json"
    if truth_path.exists() and (pred / "scores_scene1.csv").exists() and (pred / "scores_scene2.csv").exists():
        truth = json.loads(truth_path.read_text())
        scores, labels = [], []
        for k in (1, 2):
            tab = splat_io.read_score_table(pred / f"scores_scene{k}.csv")
            kind = np.asarray(truth[f"kind{k}"])
            scores.append(tab["delta_combined"])
            labels.append(kind[tab["primitive_id"]] > 0)
        scores, labels = np.concatenate(scores), np.concatenate(labels)
        if labels.any() and not labels.all():
            res["primitive_auroc"] = evaluation.auroc(scores, labels)
    return res


def cmd_eval(args) -> int:
    res = evaluate_dirs(Path(args.pred), Path(args.gt))
    out = Path(args.out) if args.out else Path(args.pred)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(res, out / "metrics.json")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for setting in ("fixed", "oracle"):
            if setting in res:
                for key in ("miou", "f1", "mean_view_iou", "threshold_used"):
                    w.writerow([f"{setting}_{key}", res[setting][key]])
        for cond, r in res.get("routing", {}).items():
            w.writerow([f"routing_{cond}_balanced_accuracy", r["balanced_accuracy"]])
        if "primitive_auroc" in res:
            w.writerow(["primitive_auroc", res["primitive_auroc"]])
    print(json.dumps({k: res[k]["miou"] for k in ("fixed", "oracle") if k in res}))
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def cmd_sweep(args) -> int:
    base = _config(args)
    if args.scene1:
        if not (args.scene2 and args.poses1 and args.poses2 and args.gt):
            raise _Failure("loaded scenes need --scene2, --poses1, --poses2 and --gt")
        s1 = _load_scene(args.scene1, args.poses1)
        s2 = _load_scene(args.scene2, args.poses2)
        gt_dir = Path(args.gt)
        gt = {i: splat_io.read_binary_map(gt_dir / f"gt_binary_{i}.png") for i in _view_ids(gt_dir, gt=True)}
    else:
        change = None if args.change == "none" else args.change
        s1, s2, truth = generate_pair(SynthSpec.moderate(args.seed, change))
        gt = truth.gt_binary
    views = [c for c in s2.cameras if c.id in gt]
    if len(views) != len(gt):
        raise _Failure("ground truth views do not match the rig-2 cameras")

    def run(override):
        r = detect(s1, s2, views, base.replace(**override))
        return {vid: m.M for vid, m in r.maps.items()}

    rows = evaluation.quantile_sweep(run, gt, args.axis, threshold=base.threshold)
    text = evaluation.sweep_to_csv(rows, args.out)
    if args.out is None:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splatdiff", description="Change detection between two Gaussian splat scenes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="score primitives and render change maps")
    p.add_argument("scene1")
    p.add_argument("scene2")
    p.add_argument("--poses1", required=True, help="pose JSON or COLMAP text directory for scene 1")
    p.add_argument("--poses2", required=True)
    p.add_argument("--views", default=None, help="cameras to render (default: scene 2 rig)")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("synth", help="generate a synthetic scene pair with ground truth")
    p.add_argument("--spec", default=None, help="synthetic spec JSON (overrides --preset)")
    p.add_argument("--preset", choices=["moderate"], default="moderate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--change", choices=list(CHANGE_KINDS) + ["mixed", "none"], default="remove")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score a detect output directory against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None, help="directory for metrics.json / metrics.csv (default: --pred)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="19-point sweep of one quantile")
    p.add_argument("--axis", required=True, choices=list(evaluation.SWEEP_AXES))
    p.add_argument("--scene1")
    p.add_argument("--scene2")
    p.add_argument("--poses1")
    p.add_argument("--poses2")
    p.add_argument("--gt", help="directory with gt_binary_<id>.png")
    p.add_argument("--seed", type=int, default=0, help="synthetic pair seed when no scenes are given")
    p.add_argument("--change", choices=list(CHANGE_KINDS) + ["mixed", "none"], default="remove")
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (SplatDiffError, _Failure, OSError, ValueError) as exc:
        msg = str(exc).replace("\n", " ")
        print(json.dumps({"error": type(exc).__name__, "message": msg}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
