"""Geometric drift: representation-ambiguity scales, Fisher information, effective covariance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import SplatDiffError, ValidationError
from .scene_model import Z_FAR, Z_NEAR, GaussianScene, visibility_mask
from .spatial import SpatialIndex
from .splat_io import CameraRecord

EPS_RANK = 1e-10


def quantile(values, q: float) -> float:
    """Linear-interpolation quantile (numpy's default ``linear`` method)."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValidationError("quantile of an empty sample")
    return float(np.quantile(values, q))


def median(values) -> float:
    return quantile(values, 0.5)


@dataclass
class AmbiguityScales:
    u_n_sq: float
    u_t_sq: float
    # per-direction quartiles (forward = scene1 -> scene2), kept for the run manifest
    q_n: tuple = (0.0, 0.0)
    q_t: tuple = (0.0, 0.0)


@dataclass(eq=False)
class ObservabilityState:
    H: np.ndarray
    H_pinv: np.ndarray
    trace_H: float | np.ndarray


@dataclass(eq=False)
class EffectiveCovariance:
    Sigma_tilde: np.ndarray
    Sigma_eff: np.ndarray
    lambda_max: float | np.ndarray


def decompose_displacement(delta, normal):
    """Split displacement(s) into normal and tangential magnitudes ``(d_n, d_t)``.

    Works on single 3-vectors or on (N, 3) batches.
    """
    delta = np.asarray(delta, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    along = np.sum(delta * normal, axis=-1)
    tangential = delta - along[..., None] * normal
    d_n = np.abs(along)
    d_t = np.linalg.norm(tangential, axis=-1)
    if d_n.ndim == 0:
        return float(d_n), float(d_t)
    return d_n, d_t


def directional_displacements(source: GaussianScene, target_index: SpatialIndex):
    """``(d_n, d_t)`` of each source primitive to its Euclidean NN in the target."""
    _, nn = target_index.nearest(source.mu)
    return decompose_displacement(target_index.points[nn] - source.mu, source.normal)


def estimate_ambiguity_scales(
    scene1: GaussianScene,
    scene2: GaussianScene,
    q: float = 0.75,
    index1: Optional[SpatialIndex] = None,
    index2: Optional[SpatialIndex] = None,
) -> AmbiguityScales:
    """Bidirectional quantile drift scales ``u_n^2, u_t^2``.

    Each direction squares its own quantile; the two squared values are then
    averaged (mean of squares).
    """
    if len(scene1) == 0 or len(scene2) == 0:
        raise ValidationError("ambiguity scales need two non-empty scenes")
    index1 = index1 or SpatialIndex(scene1.mu)
    index2 = index2 or SpatialIndex(scene2.mu)
    dn12, dt12 = directional_displacements(scene1, index2)
    dn21, dt21 = directional_displacements(scene2, index1)
    qn = (quantile(dn12, q), quantile(dn21, q))
    qt = (quantile(dt12, q), quantile(dt21, q))
    return AmbiguityScales(
        u_n_sq=0.5 * (qn[0] ** 2 + qn[1] ** 2),
        u_t_sq=0.5 * (qt[0] ** 2 + qt[1] ** 2),
        q_n=qn,
        q_t=qt,
    )


def inflation_matrix(normal, scales: AmbiguityScales) -> np.ndarray:
    normal = np.asarray(normal, dtype=np.float64)
    outer = normal[..., :, None] * normal[..., None, :]
    return scales.u_t_sq * np.eye(3) + (scales.u_n_sq - scales.u_t_sq) * outer


def inflate_representation(prim_or_cov, scales: AmbiguityScales, normal=None) -> np.ndarray:
    """``Sigma + u_t^2 I + (u_n^2 - u_t^2) n n^T``.

    Accepts a :class:`GaussianPrimitive`, or a covariance (batch) plus ``normal``.
    """
    if normal is None:
        cov, normal = prim_or_cov.Sigma, prim_or_cov.normal
    else:
        cov = prim_or_cov
    out = np.asarray(cov, dtype=np.float64) + inflation_matrix(normal, scales)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def fim_batch(points: np.ndarray, cameras: Sequence[CameraRecord], z_near: float = Z_NEAR, z_far: float = Z_FAR):
    """Fisher information of each point over the cameras whose frustum contains it.

    Returns ``(H, n_visible)``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    H = np.zeros((len(points), 3, 3))
    n_vis = np.zeros(len(points), dtype=np.int64)
    eye = np.eye(3)
    for cam in cameras:
        vis = visibility_mask(points, cam, z_near, z_far)
        if not vis.any():
            continue
        ray = points[vis] - cam.center
        d2 = np.sum(ray * ray, axis=1)
        v = ray / np.sqrt(d2)[:, None]
        H[vis] += (eye - v[:, :, None] * v[:, None, :]) / d2[:, None, None]
        n_vis += vis
    return H, n_vis


def pinv_psd(H: np.ndarray, eps_rank: float = EPS_RANK) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of symmetric PSD matrices (batched).

    Eigenvalues at or below ``eps_rank * lambda_max`` are treated as zero.
    """
    H = np.asarray(H, dtype=np.float64)
    single = H.ndim == 2
    H = H.reshape(-1, 3, 3)
    w, V = np.linalg.eigh(0.5 * (H + H.transpose(0, 2, 1)))
    cutoff = eps_rank * w[:, -1:]
    keep = (w > cutoff) & (w > 0)
    inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    out = np.einsum("nij,nj,nkj->nik", V, inv, V)
    out = 0.5 * (out + out.transpose(0, 2, 1))
    return out[0] if single else out


def compute_fim(mu, cameras: Sequence[CameraRecord], z_near: float = Z_NEAR, z_far: float = Z_FAR) -> ObservabilityState:
    """Observability of a single position under one rig."""
    H, n_vis = fim_batch(np.asarray(mu)[None], cameras, z_near, z_far)
    if n_vis[0] == 0:
        raise SplatDiffError("primitive is not observed by any camera of its own rig")
    return ObservabilityState(H=H[0], H_pinv=pinv_psd(H[0]), trace_H=float(np.trace(H[0])))


def fim_injection_scale(sigma_tilde_traces, hpinv_traces) -> float:
    """``median tr(Sigma_tilde) / median tr(H^+)`` over one scene; 0 when the denominator is 0."""
    sigma_tilde_traces = np.asarray(sigma_tilde_traces, dtype=np.float64)
    hpinv_traces = np.asarray(hpinv_traces, dtype=np.float64)
    if hpinv_traces.size == 0 or sigma_tilde_traces.size == 0:
        raise ValidationError("FIM injection scale needs a non-empty scene")
    den = median(hpinv_traces)
    if den == 0.0:
        return 0.0
    return median(sigma_tilde_traces) / den


def effective_covariance(Sigma_tilde, H_pinv, s: float) -> EffectiveCovariance:
    """``Sigma_tilde + s H^+`` and its largest eigenvalue (single or batched)."""
    Sigma_tilde = np.asarray(Sigma_tilde, dtype=np.float64)
    eff = Sigma_tilde + s * np.asarray(H_pinv, dtype=np.float64)
    eff = 0.5 * (eff + np.swapaxes(eff, -1, -2))
    lam = np.linalg.eigvalsh(eff)[..., -1]
    if np.ndim(lam) == 0:
        lam = float(lam)
    return EffectiveCovariance(Sigma_tilde=Sigma_tilde, Sigma_eff=eff, lambda_max=lam)
