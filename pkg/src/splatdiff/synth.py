"""Paired synthetic splat scenes with reconstruction-like drift and known changes.

Both scenes are sampled from the same parametric surfaces (planes, spheres,
open-bottomed boxes). Each scene then gets its own anisotropic position
jitter, its own spin about the normal and its own colour noise; scene 2 also
receives a global colour offset. A fraction of surface samples is
"resampled": one scene represents them with two half-size primitives, the
other with one. Changes are applied to scene 2 only.

Randomness comes from ``numpy.random.Generator(PCG64(seed))`` and every draw
happens in a fixed order, so a seed reproduces a pair bit for bit. Raw
parameters are rounded to float32 before activation, so a pair written to
PLY and read back activates to the same scenes.

The ``moderate`` preset (:meth:`SynthSpec.moderate`) is the documented
drift level used by the end-to-end suites:

=====================  =========
tangential jitter      0.012
normal jitter          0.003
resample fraction      0.15
colour jitter          0.02
global colour offset   (0.03, 0.02, -0.025)
=====================  =========
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import SynthSpecError
from .scene_model import SH_C0, GaussianScene, activate_table, visibility_mask
from .splat_io import LABEL_STRUCTURAL, LABEL_SURFACE, CameraRecord, SplatTable, rotmats_to_quats
from .splat_render import binarize_and_label, fuse_maps, render_reference

CHANGE_KINDS = ("remove", "add", "displace", "recolor")
KIND_NONE, KIND_STRUCTURAL, KIND_SURFACE = 0, LABEL_STRUCTURAL, LABEL_SURFACE


@dataclass
class SurfaceSpec:
    name: str
    kind: str  # "plane" | "sphere" | "box"
    center: list
    size: list = field(default_factory=lambda: [1.0, 1.0, 1.0])  # plane: (sx, sy); box: (sx, sy, sz)
    radius: float = 0.0  # sphere
    color: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    density: float = 200.0  # primitives per unit area
    texture: float = 0.08  # amplitude of the smooth colour pattern
    open_bottom: bool = True  # boxes: omit the face resting on the floor


@dataclass
class DriftSpec:
    tangential: float = 0.0
    normal: float = 0.0
    resample_fraction: float = 0.0
    color: float = 0.0
    color_offset: list = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class ChangeSpec:
    kind: str
    target: str = ""  # surface name for remove / displace / recolor
    magnitude: list = field(default_factory=lambda: [0.0, 0.0, 0.0])  # displacement or RGB shift
    surface: Optional[SurfaceSpec] = None  # inserted surface for "add"


@dataclass
class RigSpec:
    center: list
    radius: float
    count: int
    look_at: list
    width: int = 96
    height: int = 72
    focal: float = 70.0
    phase: float = 0.0
    first_id: int = 1


@dataclass
class SynthSpec:
    seed: int = 0
    surfaces: list = field(default_factory=list)
    drift: DriftSpec = field(default_factory=DriftSpec)
    changes: list = field(default_factory=list)
    rig1: Optional[RigSpec] = None
    rig2: Optional[RigSpec] = None
    opacity: float = 0.9
    thickness: float = 0.15  # normal-axis scale relative to the tangential scale
    footprint: float = 0.7  # tangential scale relative to the sample spacing

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["surfaces"] = [SurfaceSpec(**s) for s in d.get("surfaces", [])]
        d["drift"] = DriftSpec(**d.get("drift", {}))
        changes = []
        for c in d.get("changes", []):
            c = dict(c)
            if c.get("surface") is not None:
                c["surface"] = SurfaceSpec(**c["surface"])
            changes.append(ChangeSpec(**c))
        d["changes"] = changes
        for key in ("rig1", "rig2"):
            if d.get(key) is not None:
                d[key] = RigSpec(**d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        return cls.from_dict(json.loads(text))

    @classmethod
    def moderate(cls, seed: int = 0, change: Optional[str] = "remove") -> "SynthSpec":
        """Tabletop scene with the documented moderate drift.

        ``change`` is one of ``remove``, ``add``, ``displace``, ``recolor``,
        ``mixed`` (recolour one box and remove the sphere) or ``None``.
        """
        surfaces = [
            SurfaceSpec("floor", "plane", [0.0, 0.0, 0.0], [3.0, 3.0], color=[0.55, 0.5, 0.45], density=120.0),
            SurfaceSpec("box_a", "box", [0.6, 0.5, 0.25], [0.5, 0.5, 0.5], color=[0.8, 0.25, 0.2], density=450.0),
            SurfaceSpec("sphere_b", "sphere", [-0.6, 0.45, 0.3], radius=0.3, color=[0.25, 0.6, 0.3], density=450.0),
            SurfaceSpec("box_c", "box", [0.05, -0.65, 0.2], [0.6, 0.3, 0.4], color=[0.2, 0.3, 0.8], density=450.0),
        ]
        changes = []
        if change == "remove":
            changes.append(ChangeSpec("remove", target="box_a"))
        elif change == "add":
            changes.append(ChangeSpec("add", surface=SurfaceSpec(
                "sphere_new", "sphere", [-0.65, -0.55, 0.25], radius=0.25, color=[0.9, 0.8, 0.2], density=450.0)))
        elif change == "displace":
            changes.append(ChangeSpec("displace", target="sphere_b", magnitude=[0.0, -0.45, 0.0]))
        elif change == "recolor":
            changes.append(ChangeSpec("recolor", target="box_a", magnitude=[-0.4, 0.3, 0.35]))
        elif change == "mixed":
            changes.append(ChangeSpec("recolor", target="box_a", magnitude=[-0.4, 0.3, 0.35]))
            changes.append(ChangeSpec("remove", target="sphere_b"))
        elif change is not None:
            raise SynthSpecError(f"unknown change kind {change!r}")
        return cls(
            seed=seed,
            surfaces=surfaces,
            drift=DriftSpec(tangential=0.012, normal=0.003, resample_fraction=0.15, color=0.02,
                            color_offset=[0.03, 0.02, -0.025]),
            changes=changes,
            rig1=RigSpec([0.0, 0.0, 1.6], 3.2, 10, [0.0, 0.0, 0.2], phase=0.0, first_id=1),
            rig2=RigSpec([0.0, 0.0, 1.3], 2.9, 8, [0.0, 0.0, 0.2], phase=0.3, first_id=101),
        )


@dataclass(eq=False)
class SynthTruth:
    changed1: np.ndarray
    changed2: np.ndarray
    kind1: np.ndarray  # 0 none, 1 structural, 2 surface
    kind2: np.ndarray
    surface1: list  # surface name per primitive
    surface2: list
    gt_binary: dict = field(default_factory=dict)  # camera id -> bool image
    gt_labels: dict = field(default_factory=dict)  # camera id -> uint8 image
    table1: Optional[SplatTable] = None  # raw records, for PLY export
    table2: Optional[SplatTable] = None


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------


def look_at_camera(id, eye, target, width, height, focal, up=(0.0, 0.0, 1.0)) -> CameraRecord:
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    if np.linalg.norm(r) < 1e-9:
        r = np.cross(f, (0.0, 1.0, 0.0))
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    return CameraRecord(int(id), int(width), int(height), float(focal), float(focal),
                        width / 2.0, height / 2.0, R, -R @ eye)


def generate_camera_ring(center, radius: float, count: int, look_at, width: int = 96, height: int = 72,
                         focal: float = 70.0, phase: float = 0.0, first_id: int = 1) -> list:
    """``count`` cameras evenly spaced on a horizontal circle, all aimed at ``look_at``."""
    if radius <= 0 or count < 1:
        raise SynthSpecError("camera ring needs radius > 0 and count >= 1")
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for k in range(count):
        ang = phase + 2.0 * np.pi * k / count
        eye = center + radius * np.array([np.cos(ang), np.sin(ang), 0.0])
        cam = look_at_camera(first_id + k, eye, look_at, width, height, focal)
        assert visibility_mask(np.asarray(look_at, dtype=np.float64)[None], cam)[0]
        cams.append(cam)
    return cams


def rig_cameras(rig: RigSpec) -> list:
    return generate_camera_ring(rig.center, rig.radius, rig.count, rig.look_at, rig.width, rig.height,
                                rig.focal, rig.phase, rig.first_id)


# ---------------------------------------------------------------------------
# Surface sampling
# ---------------------------------------------------------------------------


def _tangent_frame(n: np.ndarray):
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return t1, t2


def _grid_on_rect(rng, origin, u, v, lu, lv, spacing):
    nu = max(1, int(round(lu / spacing)))
    nv = max(1, int(round(lv / spacing)))
    a, b = np.meshgrid((np.arange(nu) + 0.5) / nu, (np.arange(nv) + 0.5) / nv, indexing="ij")
    a = a.ravel() + rng.uniform(-0.25, 0.25, a.size) / nu
    b = b.ravel() + rng.uniform(-0.25, 0.25, b.size) / nv
    return origin + a[:, None] * lu * u + b[:, None] * lv * v


def sample_surface(s: SurfaceSpec, rng):
    """Stratified samples ``(points, normals, spacing)`` on one surface."""
    if s.density <= 0:
        raise SynthSpecError(f"surface {s.name}: density must be positive")
    spacing = 1.0 / np.sqrt(s.density)
    c = np.asarray(s.center, dtype=np.float64)
    if s.kind == "plane":
        lx, ly = s.size[0], s.size[1]
        pts = _grid_on_rect(rng, c - [lx / 2, ly / 2, 0.0], np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), lx, ly, spacing)
        nrm = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    elif s.kind == "sphere":
        n = max(4, int(round(4 * np.pi * s.radius**2 * s.density)))
        k = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * k / n)
        theta = np.pi * (1 + 5**0.5) * k + rng.uniform(0, 2 * np.pi)
        nrm = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
        pts = c + s.radius * nrm
    elif s.kind == "box":
        hx, hy, hz = (0.5 * np.asarray(s.size[:3], dtype=np.float64))
        faces = [  # (normal, origin corner, u, v, lu, lv)
            ([0, 0, 1], [-hx, -hy, hz], [1, 0, 0], [0, 1, 0], 2 * hx, 2 * hy),
            ([1, 0, 0], [hx, -hy, -hz], [0, 1, 0], [0, 0, 1], 2 * hy, 2 * hz),
            ([-1, 0, 0], [-hx, -hy, -hz], [0, 1, 0], [0, 0, 1], 2 * hy, 2 * hz),
            ([0, 1, 0], [-hx, hy, -hz], [1, 0, 0], [0, 0, 1], 2 * hx, 2 * hz),
            ([0, -1, 0], [-hx, -hy, -hz], [1, 0, 0], [0, 0, 1], 2 * hx, 2 * hz),
        ]
        if not s.open_bottom:
            faces.append(([0, 0, -1], [-hx, -hy, -hz], [1, 0, 0], [0, 1, 0], 2 * hx, 2 * hy))
        pts, nrm = [], []
        for n_, o, u, v, lu, lv in faces:
            p = _grid_on_rect(rng, c + o, np.array(u, float), np.array(v, float), lu, lv, spacing)
            pts.append(p)
            nrm.append(np.tile(n_, (len(p), 1)).astype(float))
        pts, nrm = np.concatenate(pts), np.concatenate(nrm)
    else:
        raise SynthSpecError(f"surface {s.name}: unknown kind {s.kind!r}")
    return pts, nrm, spacing


def _base_color(s: SurfaceSpec, pts):
    phase = np.array([0.0, 2.1, 4.2])
    pattern = np.sin(2.2 * pts[:, 0:1] + 1.7 * pts[:, 1:2] + 2.5 * pts[:, 2:3] + phase)
    return np.clip(np.asarray(s.color)[None] + s.texture * pattern, 0.0, 1.0)


@dataclass(eq=False)
class _Samples:
    pts: np.ndarray
    nrm: np.ndarray
    color: np.ndarray
    spacing: np.ndarray
    surface: np.ndarray  # surface index

    def __len__(self):
        return len(self.pts)


def _sample_all(surfaces, rng) -> _Samples:
    parts = []
    for k, s in enumerate(surfaces):
        p, n, sp = sample_surface(s, rng)
        parts.append((p, n, _base_color(s, p), np.full(len(p), sp), np.full(len(p), k)))
    if not parts:
        return _Samples(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, int))
    return _Samples(*[np.concatenate([p[i] for p in parts]) for i in range(5)])


def _realise(samples: _Samples, split: np.ndarray, spec: SynthSpec, rng, color_offset):
    """One scene's primitives (raw parameters) from shared samples."""
    n = len(samples)
    drift = spec.drift
    t1, t2 = _tangent_frame(samples.nrm)
    spin = rng.uniform(0, 2 * np.pi, n)
    if drift.tangential == 0:
        spin = np.zeros(n)  # drawn anyway so the stream order does not depend on the drift settings
    a1 = np.cos(spin)[:, None] * t1 + np.sin(spin)[:, None] * t2
    a2 = np.cross(samples.nrm, a1)
    jt = rng.normal(0.0, 1.0, (n, 2)) * drift.tangential
    jn = rng.normal(0.0, 1.0, n) * drift.normal
    pos = samples.pts + jt[:, :1] * t1 + jt[:, 1:] * t2 + jn[:, None] * samples.nrm
    cjit = rng.normal(0.0, 1.0, (n, 3)) * drift.color
    color = np.clip(samples.color + cjit + np.asarray(color_offset)[None], 0.0, 1.0)

    st = spec.footprint * samples.spacing
    scales = np.stack([st, st, spec.thickness * st], axis=1)
    axes = np.stack([a1, a2, samples.nrm], axis=2)  # columns

    # split primitives: two half-size copies along the first tangent axis
    s_idx = np.flatnonzero(split)
    off = 0.5 * st[s_idx, None] * a1[s_idx]
    half = scales[s_idx].copy()
    half[:, 0] *= 0.5
    keep = np.flatnonzero(~split)
    pos = np.concatenate([pos[keep], pos[s_idx] + off, pos[s_idx] - off])
    scales = np.concatenate([scales[keep], half, half])
    axes = np.concatenate([axes[keep], axes[s_idx], axes[s_idx]])
    color = np.concatenate([color[keep], color[s_idx], color[s_idx]])
    origin = np.concatenate([keep, s_idx, s_idx])
    return pos, scales, axes, color, origin


def _to_table(pos, scales, axes, color, opacity) -> SplatTable:
    quats = rotmats_to_quats(axes) if len(axes) else np.zeros((0, 4))
    logit = np.log(opacity / (1.0 - opacity))
    table = SplatTable(
        position=pos,
        rotation=quats,
        log_scales=np.log(scales),
        opacity_logit=np.full(len(pos), logit),
        sh_dc=(color - 0.5) / SH_C0,
    )
    # round-trip through float32 so PLY export is lossless
    for name in ("position", "rotation", "log_scales", "opacity_logit", "sh_dc"):
        setattr(table, name, getattr(table, name).astype(np.float32).astype(np.float64))
    return table


def generate_pair(spec: SynthSpec, render_truth: bool = True):
    """Build ``(scene1, scene2, truth)`` from a spec. Deterministic in ``spec.seed``."""
    if spec.drift.tangential < 0 or spec.drift.normal < 0 or spec.drift.color < 0:
        raise SynthSpecError("jitters must be non-negative")
    if not 0.0 <= spec.drift.resample_fraction <= 1.0:
        raise SynthSpecError("resample fraction must lie in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    names = [s.name for s in spec.surfaces]
    samples = _sample_all(spec.surfaces, rng)

    resample = rng.uniform(size=len(samples)) < spec.drift.resample_fraction
    in_first = rng.uniform(size=len(samples)) < 0.5
    split1 = resample & in_first
    split2 = resample & ~in_first

    pos1, sc1, ax1, col1, org1 = _realise(samples, split1, spec, rng, [0.0, 0.0, 0.0])
    pos2, sc2, ax2, col2, org2 = _realise(samples, split2, spec, rng, spec.drift.color_offset)
    surf1 = samples.surface[org1]
    surf2 = samples.surface[org2]
    kind1 = np.zeros(len(pos1), dtype=np.uint8)
    kind2 = np.zeros(len(pos2), dtype=np.uint8)

    for ch in spec.changes:
        if ch.kind not in CHANGE_KINDS:
            raise SynthSpecError(f"unknown change kind {ch.kind!r}")
        if ch.kind == "add":
            if ch.surface is None:
                raise SynthSpecError("'add' change needs a surface")
            new = _sample_all([ch.surface], rng)
            if len(new) == 0:
                raise SynthSpecError("'add' change region is empty of primitives")
            p, s, a, c, _ = _realise(new, np.zeros(len(new), bool), spec, rng, spec.drift.color_offset)
            names.append(ch.surface.name)
            pos2, sc2, ax2, col2 = (np.concatenate([x, y]) for x, y in ((pos2, p), (sc2, s), (ax2, a), (col2, c)))
            surf2 = np.concatenate([surf2, np.full(len(p), len(names) - 1)])
            kind2 = np.concatenate([kind2, np.full(len(p), KIND_STRUCTURAL, np.uint8)])
            continue
        if ch.target not in names:
            raise SynthSpecError(f"change target {ch.target!r} is not a surface")
        k = names.index(ch.target)
        m1, m2 = surf1 == k, surf2 == k
        if not m1.any() or not m2.any():
            raise SynthSpecError(f"change region {ch.target!r} is empty of primitives")
        if ch.kind == "remove":
            kind1[m1] = KIND_STRUCTURAL
            keep = ~m2
            pos2, sc2, ax2, col2, surf2, kind2 = (x[keep] for x in (pos2, sc2, ax2, col2, surf2, kind2))
        elif ch.kind == "displace":
            kind1[m1] = KIND_STRUCTURAL
            kind2[m2] = KIND_STRUCTURAL
            pos2 = pos2.copy()
            pos2[m2] += np.asarray(ch.magnitude, dtype=np.float64)
        elif ch.kind == "recolor":
            kind1[m1] = np.where(kind1[m1] == KIND_STRUCTURAL, KIND_STRUCTURAL, KIND_SURFACE)
            kind2[m2] = np.where(kind2[m2] == KIND_STRUCTURAL, KIND_STRUCTURAL, KIND_SURFACE)
            col2 = col2.copy()
            col2[m2] = np.clip(col2[m2] + np.asarray(ch.magnitude, dtype=np.float64), 0.0, 1.0)

    cams1 = rig_cameras(spec.rig1) if spec.rig1 else []
    cams2 = rig_cameras(spec.rig2) if spec.rig2 else []
    table1 = _to_table(pos1, sc1, ax1, col1, spec.opacity)
    table2 = _to_table(pos2, sc2, ax2, col2, spec.opacity)
    scene1 = activate_table(table1, cams1)
    scene2 = activate_table(table2, cams2)

    truth = SynthTruth(
        changed1=kind1 > 0, changed2=kind2 > 0, kind1=kind1, kind2=kind2,
        surface1=[names[i] for i in surf1], surface2=[names[i] for i in surf2],
        table1=table1, table2=table2,
    )
    if render_truth:
        for cam in cams2:
            truth.gt_binary[cam.id], truth.gt_labels[cam.id] = truth_masks(scene1, scene2, truth, cam)
    return scene1, scene2, truth


def truth_masks(scene1: GaussianScene, scene2: GaussianScene, truth: SynthTruth, cam: CameraRecord):
    """Ground-truth binary and label masks for one view, via the reference renderer at 0.5."""
    fused = []
    for scene, kind in ((scene1, truth.kind1), (scene2, truth.kind2)):
        chans = np.stack([kind > 0, kind == KIND_STRUCTURAL, kind == KIND_SURFACE]).astype(float)
        fused.append(render_reference(scene, chans, cam))
    any_, struct, surf = fuse_maps(fused[0], fused[1])
    return binarize_and_label(any_, struct, surf, 0.5)
