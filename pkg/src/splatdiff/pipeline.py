"""End-to-end primitive-space change detection between two splat scenes.

Stages, in order:

1. geometric drift: bidirectional ambiguity scales, per-scene Fisher
   information over the scene's own rig, FIM-injection scale and effective
   covariances;
2. kernel scoring: colour bandwidth, then geometric and appearance change
   scores for every primitive of each scene against the other scene;
3. aggregation: confidence weights and saturated combined scores, rendered
   per scene and fused by pixel-wise maximum;
4. disambiguation: structural and surface channels rendered, fused and used
   to label changed pixels.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import aggregation, change_kernels, drift_model
from .errors import SplatDiffError, ValidationError
from .scene_model import Z_FAR, Z_NEAR, GaussianScene, covisibility_filter
from .spatial import SpatialIndex
from .splat_io import CameraRecord
from .splat_render import ChangeMaps, binarize_and_label, fuse_maps, render_channels

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    eta: float = change_kernels.ETA
    geo_quantile: float = 0.75
    color_quantile: float = 0.50
    conf_quantile: float = 0.25
    threshold: float = 0.5
    z_near: float = Z_NEAR
    z_far: float = Z_FAR
    min_opacity: float = 0.0
    eps_color: float = change_kernels.EPS_COLOR
    weighted_color_median: bool = False
    render_size: Optional[tuple] = None  # (width, height); intrinsics are rescaled
    workers: int = 1

    def __post_init__(self):
        for name in ("geo_quantile", "color_quantile", "conf_quantile", "threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1), got {v}")
        if not self.eta > 0:
            raise ValidationError("eta must be positive")
        if not 0 < self.z_near < self.z_far:
            raise ValidationError("need 0 < z_near < z_far")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")

    def replace(self, **changes) -> "PipelineConfig":
        d = asdict(self)
        d.update(changes)
        return PipelineConfig(**d)


@dataclass(eq=False)
class SceneState:
    """Per-scene quantities produced by the pipeline (retained primitives only)."""

    scene: GaussianScene
    sigma_tilde: np.ndarray = None
    H: np.ndarray = None
    H_pinv: np.ndarray = None
    fim_scale: float = 0.0
    sigma_eff: np.ndarray = None
    lambda_max: np.ndarray = None
    h_tilde_sq: float = 0.0
    sigma_ci_sq: np.ndarray = None
    neighbor_count: np.ndarray = None
    scores: aggregation.PrimitiveScores = None
    q_ref: float = 0.0


@dataclass(eq=False)
class DetectionResult:
    states: tuple
    scales: drift_model.AmbiguityScales
    bandwidth: change_kernels.PhotometricBandwidth
    maps: dict = field(default_factory=dict)  # view id -> ChangeMaps
    manifest: dict = field(default_factory=dict)


def resize_camera(cam: CameraRecord, size) -> CameraRecord:
    if size is None:
        return cam
    w, h = int(size[0]), int(size[1])
    sx, sy = w / cam.width, h / cam.height
    return CameraRecord(cam.id, w, h, cam.fx * sx, cam.fy * sy, cam.cx * sx, cam.cy * sy, cam.R, cam.t)


def model_drift(scene1: GaussianScene, scene2: GaussianScene, cfg: PipelineConfig, index1=None, index2=None):
    """Stage 1. Returns ``(scales, (state1, state2))``."""
    index1 = index1 or SpatialIndex(scene1.mu)
    index2 = index2 or SpatialIndex(scene2.mu)
    scales = drift_model.estimate_ambiguity_scales(scene1, scene2, cfg.geo_quantile, index1, index2)
    states = []
    for scene in (scene1, scene2):
        st = SceneState(scene=scene)
        st.sigma_tilde = drift_model.inflate_representation(scene.cov, scales, normal=scene.normal)
        st.H, n_vis = drift_model.fim_batch(scene.mu, scene.cameras, cfg.z_near, cfg.z_far)
        if np.any(n_vis == 0):
            raise SplatDiffError("internal error: a retained primitive is not seen by its own rig")
        st.H_pinv = drift_model.pinv_psd(st.H)
        st.fim_scale = drift_model.fim_injection_scale(
            np.trace(st.sigma_tilde, axis1=1, axis2=2), np.trace(st.H_pinv, axis1=1, axis2=2)
        )
        eff = drift_model.effective_covariance(st.sigma_tilde, st.H_pinv, st.fim_scale)
        st.sigma_eff, st.lambda_max = eff.Sigma_eff, eff.lambda_max
        scene.set_derived("Sigma_eff", st.sigma_eff)
        scene.set_derived("H", st.H)
        scene.set_derived("H_pinv", st.H_pinv)
        states.append(st)
    return scales, tuple(states)


def score_kernels(states, cfg: PipelineConfig, index1=None, index2=None):
    """Stage 2. Fills bandwidth and change scores; returns the global bandwidth."""
    s1, s2 = states
    index1 = index1 or SpatialIndex(s1.scene.mu)
    index2 = index2 or SpatialIndex(s2.scene.mu)
    bw = change_kernels.estimate_color_bandwidth(
        s1.scene, s2.scene, s1.sigma_eff, s2.sigma_eff, q=cfg.color_quantile, floor=cfg.eps_color,
        weighted_median=cfg.weighted_color_median, index1=index1, index2=index2,
    )
    for src, tgt, tgt_index in ((s1, s2, index2), (s2, s1, index1)):
        trace_eff = np.trace(src.sigma_eff, axis1=1, axis2=2)
        src.h_tilde_sq = drift_model.median(trace_eff)
        src.sigma_ci_sq = change_kernels.adaptive_bandwidth(bw.sigma_c_sq, trace_eff, src.h_tilde_sq)
        dg, da, counts = change_kernels.score_scene(
            src.scene.mu, src.sigma_eff, src.lambda_max, src.scene.color, src.sigma_ci_sq,
            tgt_index, tgt.sigma_eff, tgt.scene.color, eta=cfg.eta, workers=cfg.workers,
        )
        src.neighbor_count = counts
        src.scores = aggregation.PrimitiveScores(dg, da, None, None, None, src.scene.source_index)
    return bw


def aggregate_scores(states, cfg: PipelineConfig):
    """Stage 3 (per-primitive part): confidence weights and combined scores."""
    for st in states:
        trace_H = np.trace(st.H, axis1=1, axis2=2)
        st.scores, st.q_ref = aggregation.aggregate(
            st.scores.delta_geo, st.scores.delta_app, trace_H, cfg.conf_quantile, st.scene.source_index
        )


def render_view(states, cam: CameraRecord, cfg: PipelineConfig) -> ChangeMaps:
    """Stages 3-4 for one viewpoint."""
    per_scene = []
    for st in states:
        sc = st.scores
        chans = np.stack([sc.delta_combined, sc.delta_geo, sc.residual_surf])
        per_scene.append(render_channels(st.scene, chans, cam, cfg.z_near, cfg.z_far, workers=cfg.workers))
    (M1, g1, f1), (M2, g2, f2) = per_scene
    M = fuse_maps(M1, M2)
    M_struct = fuse_maps(g1, g2)
    M_surf = fuse_maps(f1, f2)
    binary, labels = binarize_and_label(M, M_struct, M_surf, cfg.threshold)
    return ChangeMaps(M1=M1, M2=M2, M=M, M_struct=M_struct, M_surf=M_surf, binary=binary, labels=labels)


def detect(
    scene1: GaussianScene,
    scene2: GaussianScene,
    views: Optional[Sequence[CameraRecord]] = None,
    cfg: Optional[PipelineConfig] = None,
    manifest: Optional[dict] = None,
) -> DetectionResult:
    """Run the full pipeline. ``views`` defaults to scene 2's cameras.

    ``manifest`` (if given) is updated in place as stages finish, so callers
    can persist partial progress when a later stage fails.
    """
    cfg = cfg or PipelineConfig()
    manifest = {} if manifest is None else manifest
    manifest["config"] = asdict(cfg)
    manifest["stages_completed"] = []
    timing = manifest.setdefault("timing_s", {})

    t0 = time.perf_counter()
    n_in = (len(scene1), len(scene2))
    if cfg.min_opacity > 0:
        scene1 = scene1.subset(scene1.opacity >= cfg.min_opacity)
        scene2 = scene2.subset(scene2.opacity >= cfg.min_opacity)
    scene1, scene2 = covisibility_filter(scene1, scene2, cfg.z_near, cfg.z_far)
    manifest["primitives"] = {"input": list(n_in), "retained": [len(scene1), len(scene2)]}
    index1, index2 = SpatialIndex(scene1.mu), SpatialIndex(scene2.mu)
    timing["filter"] = time.perf_counter() - t0
    manifest["stages_completed"].append("covisibility")

    t0 = time.perf_counter()
    scales, states = model_drift(scene1, scene2, cfg, index1, index2)
    timing["drift"] = time.perf_counter() - t0
    manifest["drift"] = {
        "u_n_sq": scales.u_n_sq, "u_t_sq": scales.u_t_sq,
        "q_n": list(scales.q_n), "q_t": list(scales.q_t),
        "fim_scale": [states[0].fim_scale, states[1].fim_scale],
    }
    manifest["stages_completed"].append("drift")
    logger.info("drift: u_n^2=%.3g u_t^2=%.3g s=(%.3g, %.3g)", scales.u_n_sq, scales.u_t_sq,
                states[0].fim_scale, states[1].fim_scale)

    t0 = time.perf_counter()
    bw = score_kernels(states, cfg, index1, index2)
    timing["kernels"] = time.perf_counter() - t0
    manifest["appearance"] = {
        "sigma_c_sq": bw.sigma_c_sq, "directional": list(bw.directional),
        "h_tilde_sq": [states[0].h_tilde_sq, states[1].h_tilde_sq],
    }
    manifest["stages_completed"].append("kernels")

    aggregate_scores(states, cfg)
    manifest["confidence"] = {"q_ref": [states[0].q_ref, states[1].q_ref]}
    manifest["stages_completed"].append("aggregation")

    t0 = time.perf_counter()
    views = list(scene2.cameras) if views is None else list(views)
    result = DetectionResult(states=states, scales=scales, bandwidth=bw, manifest=manifest)
    for cam in views:
        result.maps[cam.id] = render_view(states, resize_camera(cam, cfg.render_size), cfg)
    timing["render"] = time.perf_counter() - t0
    manifest["views"] = [int(c.id) for c in views]
    manifest["stages_completed"].append("render")
    return result
