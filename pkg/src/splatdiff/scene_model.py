"""Activated Gaussian primitives, scenes and frustum co-visibility."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import NoCovisibleRegionError, ValidationError
from .splat_io import CameraRecord, RawSplatRecord, SplatTable

SH_C0 = 0.28209479177387814
Z_NEAR = 0.01
Z_FAR = 1000.0


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def quat_to_rotmat_batch(q: np.ndarray) -> np.ndarray:
    """(N, 4) quaternions (w, x, y, z) -> (N, 3, 3) rotations; normalises first."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms <= 0.0):
        raise ValidationError("zero quaternion")
    w, x, y, z = (q / norms[:, None]).T
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def smallest_axis(scales: np.ndarray) -> np.ndarray:
    """Index of the smallest scale; ties go to the highest tied index (so isotropic -> 2)."""
    scales = np.asarray(scales).reshape(-1, 3)
    return 2 - np.argmin(scales[:, ::-1], axis=1)


@dataclass(eq=False)
class GaussianPrimitive:
    mu: np.ndarray
    R: np.ndarray
    S: np.ndarray
    Sigma: np.ndarray
    opacity: float
    color_dc: np.ndarray
    normal: np.ndarray


def activate(raw: RawSplatRecord) -> GaussianPrimitive:
    """Apply the standard 3DGS activations to one stored record."""
    R = quat_to_rotmat_batch(np.asarray(raw.rotation)[None])[0]
    S = np.exp(np.asarray(raw.log_scales, dtype=np.float64))
    Sigma = (R * S**2) @ R.T
    Sigma = 0.5 * (Sigma + Sigma.T)
    color = np.clip(0.5 + SH_C0 * np.asarray(raw.sh_dc, dtype=np.float64), 0.0, 1.0)
    normal = R[:, smallest_axis(S)[0]].copy()
    return GaussianPrimitive(
        mu=np.asarray(raw.position, dtype=np.float64).copy(),
        R=R,
        S=S,
        Sigma=Sigma,
        opacity=float(sigmoid(raw.opacity_logit)),
        color_dc=color,
        normal=normal,
    )


@dataclass(eq=False)
class GaussianScene:
    """A set of activated primitives with its capture rig.

    Arrays are indexed by primitive. ``source_index`` maps each primitive back
    to its row in the file it was loaded from, surviving any filtering.
    ``derived`` holds per-primitive quantities filled in by later stages.
    """

    mu: np.ndarray
    R: np.ndarray
    scales: np.ndarray
    cov: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    normal: np.ndarray
    cameras: list = field(default_factory=list)
    source_index: Optional[np.ndarray] = None
    derived: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source_index is None:
            self.source_index = np.arange(len(self.mu), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.mu)

    def set_derived(self, name: str, values) -> None:
        values = np.asarray(values)
        if len(values) != len(self):
            raise ValidationError(f"derived slot {name!r} has length {len(values)}, scene has {len(self)}")
        self.derived[name] = values

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.mu[i], self.R[i], self.scales[i], self.cov[i], float(self.opacity[i]), self.color[i], self.normal[i]
        )

    def subset(self, keep) -> "GaussianScene":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return GaussianScene(
            mu=self.mu[keep], R=self.R[keep], scales=self.scales[keep], cov=self.cov[keep],
            opacity=self.opacity[keep], color=self.color[keep], normal=self.normal[keep],
            cameras=list(self.cameras), source_index=self.source_index[keep],
            derived={k: v[keep] for k, v in self.derived.items()},
        )

    def transformed(self, Q: np.ndarray, offset=None) -> "GaussianScene":
        """Rigidly move primitives *and* cameras by ``x -> Q x + offset``."""
        Q = np.asarray(Q, dtype=np.float64)
        b = np.zeros(3) if offset is None else np.asarray(offset, dtype=np.float64)
        cams = []
        for c in self.cameras:
            # x_cam = R x + t = R Q^T (x' - b) + t
            R = c.R @ Q.T
            cams.append(CameraRecord(c.id, c.width, c.height, c.fx, c.fy, c.cx, c.cy, R, c.t - R @ b))
        RQ = Q @ self.R
        return GaussianScene(
            mu=self.mu @ Q.T + b, R=RQ, scales=self.scales.copy(), cov=Q @ self.cov @ Q.T,
            opacity=self.opacity.copy(), color=self.color.copy(), normal=self.normal @ Q.T,
            cameras=cams, source_index=self.source_index.copy(),
        )

    @classmethod
    def empty(cls, cameras=()) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros((0, 3, 3)),
                   np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)), list(cameras))


def activate_table(table: SplatTable, cameras: Sequence[CameraRecord] = (), min_opacity: float = 0.0) -> GaussianScene:
    """Vectorised :func:`activate` over a whole table."""
    if len(table) == 0:
        return GaussianScene.empty(cameras)
    R = quat_to_rotmat_batch(table.rotation)
    S = np.exp(table.log_scales)
    cov = np.einsum("nij,nj,nkj->nik", R, S**2, R)
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    axis = smallest_axis(S)
    normal = R[np.arange(len(R)), :, axis]
    scene = GaussianScene(
        mu=table.position.copy(), R=R, scales=S, cov=cov,
        opacity=sigmoid(table.opacity_logit),
        color=np.clip(0.5 + SH_C0 * table.sh_dc, 0.0, 1.0),
        normal=normal, cameras=list(cameras),
    )
    if min_opacity > 0:
        scene = scene.subset(scene.opacity >= min_opacity)
    return scene


def project(points: np.ndarray, cam: CameraRecord):
    """Camera-frame coordinates and pixel coordinates of world points."""
    pc = cam.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
    return pc, u, v


def visibility_mask(points: np.ndarray, cam: CameraRecord, z_near: float = Z_NEAR, z_far: float = Z_FAR) -> np.ndarray:
    """Vectorised :func:`frustum_visible`."""
    pc, u, v = project(points, cam)
    z = pc[:, 2]
    inside_depth = (z > z_near) & (z < z_far)
    with np.errstate(invalid="ignore"):
        inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return inside_depth & inside


def frustum_visible(mu, cam: CameraRecord, z_near: float = Z_NEAR, z_far: float = Z_FAR) -> bool:
    """True iff ``mu`` projects inside the image with depth in ``(z_near, z_far)``."""
    return bool(visibility_mask(np.asarray(mu)[None], cam, z_near, z_far)[0])


def visible_count(points: np.ndarray, cameras: Sequence[CameraRecord], z_near: float = Z_NEAR, z_far: float = Z_FAR):
    count = np.zeros(len(points), dtype=np.int64)
    for cam in cameras:
        count += visibility_mask(points, cam, z_near, z_far)
    return count


def covisibility_filter(scene1: GaussianScene, scene2: GaussianScene, z_near: float = Z_NEAR, z_far: float = Z_FAR):
    """Keep primitives seen by at least one camera of *each* rig."""
    kept = []
    for k, scene in enumerate((scene1, scene2), start=1):
        keep = (visible_count(scene.mu, scene1.cameras, z_near, z_far) > 0) & (
            visible_count(scene.mu, scene2.cameras, z_near, z_far) > 0
        )
        if not keep.any():
            raise NoCovisibleRegionError(f"no co-visible region: scene {k} has no primitive seen by both rigs")
        kept.append(scene.subset(keep))
    return kept[0], kept[1]
