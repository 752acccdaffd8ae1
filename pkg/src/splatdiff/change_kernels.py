"""Drift-aware neighbour retrieval and the geometric / appearance change kernels."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .drift_model import quantile
from .errors import SplatDiffError, ValidationError
from .spatial import SpatialIndex

ETA = 3.0
EPS_COLOR = 1e-6
# relative determinant below which M is regularised before inversion
SINGULAR_RTOL = 1e-15
CHUNK = 2048


@dataclass(eq=False)
class NeighborSet:
    indices: np.ndarray
    radius: float


@dataclass
class PhotometricBandwidth:
    sigma_c_sq: float
    directional: tuple = (0.0, 0.0)  # raw per-direction statistics before averaging / floor


def search_radius(lambda_max, eta: float = ETA):
    return eta * np.sqrt(np.maximum(lambda_max, 0.0))


def retrieve_neighbors(mu, lambda_max: float, target_index: SpatialIndex, eta: float = ETA) -> NeighborSet:
    """All target primitives within ``eta * sqrt(lambda_max)`` of ``mu``."""
    r = float(search_radius(lambda_max, eta))
    return NeighborSet(indices=target_index.ball(mu, r), radius=r)


def _inv_sym3(M: np.ndarray):
    """Closed-form inverse of (P, 3, 3) symmetric matrices, regularising near-singular ones."""
    M = np.array(M, dtype=np.float64, copy=True)
    tr = np.trace(M, axis1=-2, axis2=-1)

    def det(A):
        return (
            A[:, 0, 0] * (A[:, 1, 1] * A[:, 2, 2] - A[:, 1, 2] * A[:, 2, 1])
            - A[:, 0, 1] * (A[:, 1, 0] * A[:, 2, 2] - A[:, 1, 2] * A[:, 2, 0])
            + A[:, 0, 2] * (A[:, 1, 0] * A[:, 2, 1] - A[:, 1, 1] * A[:, 2, 0])
        )

    d = det(M)
    bad = d <= SINGULAR_RTOL * (tr / 3.0) ** 3
    if bad.any():
        M[bad] += (1e-9 * tr[bad] / 3.0)[:, None, None] * np.eye(3)
        d = det(M)
        if np.any(d <= 0):
            raise SplatDiffError("kernel covariance is singular after regularisation")
    a, b, c = M[:, 0, 0], M[:, 0, 1], M[:, 0, 2]
    e, f, i = M[:, 1, 1], M[:, 1, 2], M[:, 2, 2]
    adj = np.empty_like(M)
    adj[:, 0, 0] = e * i - f * f
    adj[:, 0, 1] = adj[:, 1, 0] = c * f - b * i
    adj[:, 0, 2] = adj[:, 2, 0] = b * f - c * e
    adj[:, 1, 1] = a * i - c * c
    adj[:, 1, 2] = adj[:, 2, 1] = b * c - a * f
    adj[:, 2, 2] = a * e - b * b
    return adj / d[:, None, None]


def kgeo_pairs(delta: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``exp(-0.5 delta^T M^-1 delta)`` for (P, 3) displacements and (P, 3, 3) kernels."""
    delta = np.asarray(delta, dtype=np.float64).reshape(-1, 3)
    if len(delta) == 0:
        return np.zeros(0)
    Minv = _inv_sym3(np.asarray(M).reshape(-1, 3, 3))
    quad = np.einsum("pi,pij,pj->p", delta, Minv, delta)
    return np.exp(-0.5 * np.maximum(quad, 0.0))


def geometric_kernel(mu_i, Sigma_eff_i, mu_j, Sigma_eff_j) -> float:
    """Unnormalised anisotropic Mahalanobis RBF between two primitive centres."""
    delta = np.asarray(mu_i, dtype=np.float64) - np.asarray(mu_j, dtype=np.float64)
    M = np.asarray(Sigma_eff_i, dtype=np.float64) + np.asarray(Sigma_eff_j, dtype=np.float64)
    return float(kgeo_pairs(delta[None], M[None])[0])


def appearance_kernel(c_i, c_j, sigma_ci_sq: float) -> float:
    diff = np.asarray(c_i, dtype=np.float64) - np.asarray(c_j, dtype=np.float64)
    return float(np.exp(-np.dot(diff, diff) / (2.0 * sigma_ci_sq)))


def score_geometric(mu_i, Sigma_eff_i, target_mu, target_eff, neighbors: NeighborSet) -> float:
    """``1 - max_j k_geo`` over the neighbour set (1 when it is empty)."""
    idx = neighbors.indices
    if len(idx) == 0:
        return 1.0
    delta = np.asarray(mu_i)[None] - target_mu[idx]
    k = kgeo_pairs(delta, np.asarray(Sigma_eff_i)[None] + target_eff[idx])
    return float(1.0 - k.max())


def score_appearance(color_i, target_color, neighbors: NeighborSet, sigma_ci_sq: float) -> float:
    """``1 - max_j k_app`` over the same neighbour set used for the geometric score."""
    idx = neighbors.indices
    if len(idx) == 0:
        return 1.0
    diff = target_color[idx] - np.asarray(color_i)[None]
    k = np.exp(-np.sum(diff * diff, axis=1) / (2.0 * sigma_ci_sq))
    return float(1.0 - k.max())


def adaptive_bandwidth(sigma_c_sq, trace_eff, h_tilde_sq: float):
    """Per-primitive colour bandwidth, widened for large footprints and floored at ``sigma_c_sq``."""
    if not h_tilde_sq > 0:
        raise ValidationError("degenerate scene: median effective-covariance trace is zero")
    out = sigma_c_sq * np.maximum(np.asarray(trace_eff, dtype=np.float64) / h_tilde_sq, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def weighted_quantile(values, weights, q: float) -> float:
    """Smallest value whose cumulative weight reaches ``q`` of the total."""
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    cw = np.cumsum(weights[order])
    if cw[-1] <= 0:
        return 0.0
    return float(values[order][np.searchsorted(cw, q * cw[-1], side="left")])


def _directional_color_stat(src_mu, src_eff, src_color, tgt_index, tgt_eff, tgt_color, q, weighted):
    _, nn = tgt_index.nearest(src_mu)
    w = kgeo_pairs(src_mu - tgt_index.points[nn], src_eff + tgt_eff[nn])
    diff = src_color - tgt_color[nn]
    d2 = np.sum(diff * diff, axis=1)
    if weighted:
        return weighted_quantile(d2, w, q)
    return quantile(w * d2, q)


def estimate_color_bandwidth(
    scene1,
    scene2,
    eff1: np.ndarray,
    eff2: np.ndarray,
    q: float = 0.5,
    floor: float = EPS_COLOR,
    weighted_median: bool = False,
    index1: Optional[SpatialIndex] = None,
    index2: Optional[SpatialIndex] = None,
) -> PhotometricBandwidth:
    """Global colour bandwidth from kernel-weighted NN colour differences, both directions averaged.

    By default this is the plain quantile of the products ``w_i * |dc|^2``;
    ``weighted_median=True`` instead takes the ``w``-weighted quantile of ``|dc|^2``.
    """
    if len(scene1) == 0 or len(scene2) == 0:
        raise ValidationError("colour bandwidth needs two non-empty scenes")
    index1 = index1 or SpatialIndex(scene1.mu)
    index2 = index2 or SpatialIndex(scene2.mu)
    a = _directional_color_stat(scene1.mu, eff1, scene1.color, index2, eff2, scene2.color, q, weighted_median)
    b = _directional_color_stat(scene2.mu, eff2, scene2.color, index1, eff1, scene1.color, q, weighted_median)
    return PhotometricBandwidth(sigma_c_sq=max(0.5 * (a + b), floor), directional=(a, b))


def _score_chunk(lo, hi, src_mu, src_eff, src_color, src_radius, sigma_ci_sq, tgt_index, tgt_eff, tgt_color):
    nbrs = tgt_index.balls(src_mu[lo:hi], src_radius[lo:hi])
    counts = np.array([len(n) for n in nbrs], dtype=np.int64)
    best_geo = np.zeros(hi - lo)
    best_app = np.zeros(hi - lo)
    if counts.sum():
        tgt = np.concatenate(nbrs)
        src = np.repeat(np.arange(lo, hi), counts)
        kg = kgeo_pairs(src_mu[src] - tgt_index.points[tgt], src_eff[src] + tgt_eff[tgt])
        diff = src_color[src] - tgt_color[tgt]
        ka = np.exp(-np.sum(diff * diff, axis=1) / (2.0 * sigma_ci_sq[src]))
        np.maximum.at(best_geo, src - lo, kg)
        np.maximum.at(best_app, src - lo, ka)
    return 1.0 - best_geo, 1.0 - best_app, counts


def score_scene(
    src_mu, src_eff, src_lambda_max, src_color, sigma_ci_sq,
    tgt_index: SpatialIndex, tgt_eff, tgt_color,
    eta: float = ETA, workers: int = 1, chunk: int = CHUNK,
):
    """``(delta_geo, delta_app, neighbour_counts)`` for every source primitive.

    Work is split into fixed-size chunks, so results do not depend on ``workers``.
    """
    n = len(src_mu)
    radius = search_radius(src_lambda_max, eta)
    sigma_ci_sq = np.broadcast_to(np.asarray(sigma_ci_sq, dtype=np.float64), (n,))
    bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
    args = (src_mu, src_eff, src_color, radius, sigma_ci_sq, tgt_index, tgt_eff, tgt_color)
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: _score_chunk(b[0], b[1], *args), bounds))
    else:
        parts = [_score_chunk(lo, hi, *args) for lo, hi in bounds]
    if not parts:
        return np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64)
    return tuple(np.concatenate([p[k] for p in parts]) for k in range(3))
