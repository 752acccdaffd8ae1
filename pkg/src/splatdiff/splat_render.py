"""Scalar EWA splatting with front-to-back alpha compositing, plus map fusion and labelling.

Each primitive is projected with the local perspective Jacobian,
``Sigma_2d = J W Sigma W^T J^T + blur I``. A pixel at offset ``x`` from the
projected centre receives ``alpha = min(0.99, opacity * exp(-q/2))`` with
``q = x^T Sigma_2d^-1 x``, provided ``q <= cutoff^2`` (3 sigma by default);
outside that ellipse the primitive contributes nothing. Primitives are
composited in ascending camera depth, ties broken by primitive index.

:func:`render_scalar` is the tiled production path; :func:`render_reference`
composites the whole image one primitive at a time without tiling.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .scene_model import Z_FAR, Z_NEAR, GaussianScene
from .splat_io import LABEL_STRUCTURAL, LABEL_SURFACE, CameraRecord

BLUR = 0.3
ALPHA_MAX = 0.99
CUTOFF_SIGMA = 3.0
TILE = 16


@dataclass(eq=False)
class Splats2D:
    """Projected primitives for one camera, already in compositing order."""

    order: np.ndarray  # indices into the scene
    mean: np.ndarray  # (P, 2) pixel coordinates
    conic: np.ndarray  # (P, 3) inverse 2D covariance (a, b, c) for [[a, b], [b, c]]
    opacity: np.ndarray
    radius: np.ndarray  # bounding radius of the cutoff ellipse, pixels


@dataclass(eq=False)
class ChangeMaps:
    M1: np.ndarray
    M2: np.ndarray
    M: np.ndarray
    M_struct: np.ndarray
    M_surf: np.ndarray
    binary: np.ndarray
    labels: np.ndarray


def _check_camera(cam: CameraRecord):
    if cam.width <= 0 or cam.height <= 0:
        raise ValidationError("camera has zero image area")


def project_splats(
    mu, cov, opacity, cam: CameraRecord,
    z_near: float = Z_NEAR, z_far: float = Z_FAR,
    blur: float = BLUR, cutoff: float = CUTOFF_SIGMA,
) -> Splats2D:
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    cov = np.asarray(cov, dtype=np.float64).reshape(-1, 3, 3)
    opacity = np.asarray(opacity, dtype=np.float64).reshape(-1)
    pc = cam.to_camera(mu)
    x, y, z = pc.T
    ok = (z > z_near) & (z < z_far)
    idx = np.flatnonzero(ok)
    x, y, z = x[idx], y[idx], z[idx]
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / z**2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / z**2
    T = J @ cam.R
    S2 = T @ cov[idx] @ T.transpose(0, 2, 1)
    a = S2[:, 0, 0] + blur
    b = 0.5 * (S2[:, 0, 1] + S2[:, 1, 0])
    c = S2[:, 1, 1] + blur
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = cutoff * np.sqrt(lam_max)
    mean = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)

    order = np.lexsort((idx, z))
    return Splats2D(order=idx[order], mean=mean[order], conic=conic[order], opacity=opacity[idx][order], radius=radius[order])


def _alpha(sp: Splats2D, sel, px, py, cutoff: float):
    """(len(sel), len(px)) alpha matrix for the selected splats at pixel centres."""
    dx = px[None, :] - sp.mean[sel, 0][:, None]
    dy = py[None, :] - sp.mean[sel, 1][:, None]
    ca, cb, cc = sp.conic[sel, 0][:, None], sp.conic[sel, 1][:, None], sp.conic[sel, 2][:, None]
    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    alpha = np.minimum(ALPHA_MAX, sp.opacity[sel][:, None] * np.exp(-0.5 * q))
    return np.where(q <= cutoff * cutoff, alpha, 0.0)


def _tile_weights(sp: Splats2D, x0, x1, y0, y1, cutoff):
    """Compositing weights ``alpha_k T_k`` for the splats touching one tile."""
    sel = np.flatnonzero(
        (sp.mean[:, 0] + sp.radius >= x0) & (sp.mean[:, 0] - sp.radius <= x1)
        & (sp.mean[:, 1] + sp.radius >= y0) & (sp.mean[:, 1] - sp.radius <= y1)
    )
    cols, rows = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
    px = cols.ravel() + 0.5
    py = rows.ravel() + 0.5
    if len(sel) == 0:
        return sel, np.zeros((0, len(px)))
    alpha = _alpha(sp, sel, px, py, cutoff)
    trans = np.cumprod(1.0 - alpha, axis=0)
    before = np.vstack([np.ones((1, len(px))), trans[:-1]])
    return sel, alpha * before


def render_channels(
    scene: GaussianScene, channels, cam: CameraRecord,
    z_near: float = Z_NEAR, z_far: float = Z_FAR, workers: int = 1,
    blur: float = BLUR, cutoff: float = CUTOFF_SIGMA, tile: int = TILE,
) -> np.ndarray:
    """Tiled render of several per-primitive channels at once -> (C, H, W) in [0, 1]."""
    _check_camera(cam)
    channels = np.atleast_2d(np.asarray(channels, dtype=np.float64))
    if channels.shape[1] != len(scene):
        raise ValidationError("channel length must equal the primitive count")
    out = np.zeros((len(channels), cam.height, cam.width))
    if len(scene) == 0:
        return out
    sp = project_splats(scene.mu, scene.cov, scene.opacity, cam, z_near, z_far, blur, cutoff)
    vals = channels[:, sp.order]
    tiles = [
        (x0, min(x0 + tile, cam.width), y0, min(y0 + tile, cam.height))
        for y0 in range(0, cam.height, tile)
        for x0 in range(0, cam.width, tile)
    ]

    def work(t):
        x0, x1, y0, y1 = t
        sel, w = _tile_weights(sp, x0, x1, y0, y1, cutoff)
        # einsum (no BLAS) keeps the summation order fixed
        return t, np.einsum("cp,pk->ck", vals[:, sel], w) if len(sel) else np.zeros((len(vals), w.shape[1]))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, tiles))
    else:
        results = [work(t) for t in tiles]
    for (x0, x1, y0, y1), img in results:
        out[:, y0:y1, x0:x1] = img.reshape(len(vals), y1 - y0, x1 - x0)
    return np.clip(out, 0.0, 1.0)


def render_scalar(scene: GaussianScene, channel, cam: CameraRecord, **kwargs) -> np.ndarray:
    """Render one per-primitive scalar channel to an (H, W) image."""
    return render_channels(scene, np.asarray(channel)[None], cam, **kwargs)[0]


def render_reference(
    scene: GaussianScene, channel, cam: CameraRecord,
    z_near: float = Z_NEAR, z_far: float = Z_FAR,
    blur: float = BLUR, cutoff: float = CUTOFF_SIGMA,
) -> np.ndarray:
    """Untiled renderer: primitives are composited one at a time over the whole image.

    Each primitive only touches the pixels inside its cutoff box (alpha is
    exactly zero elsewhere). ``channel`` may be (N,) or (C, N); the result is
    (H, W) or (C, H, W) accordingly.
    """
    _check_camera(cam)
    channel = np.asarray(channel, dtype=np.float64)
    single = channel.ndim == 1
    channel = np.atleast_2d(channel)
    if channel.shape[1] != len(scene):
        raise ValidationError("channel length must equal the primitive count")
    value = np.zeros((len(channel), cam.height, cam.width))
    trans = np.ones((cam.height, cam.width))
    if len(scene):
        sp = project_splats(scene.mu, scene.cov, scene.opacity, cam, z_near, z_far, blur, cutoff)
        lo_x = np.clip(np.floor(sp.mean[:, 0] - sp.radius - 0.5), 0, cam.width).astype(int)
        hi_x = np.clip(np.ceil(sp.mean[:, 0] + sp.radius + 0.5), 0, cam.width).astype(int)
        lo_y = np.clip(np.floor(sp.mean[:, 1] - sp.radius - 0.5), 0, cam.height).astype(int)
        hi_y = np.clip(np.ceil(sp.mean[:, 1] + sp.radius + 0.5), 0, cam.height).astype(int)
        for k in range(len(sp.order)):
            x0, x1, y0, y1 = lo_x[k], hi_x[k], lo_y[k], hi_y[k]
            if x0 >= x1 or y0 >= y1:
                continue
            py, px = np.mgrid[y0:y1, x0:x1]
            alpha = _alpha(sp, np.array([k]), px.ravel() + 0.5, py.ravel() + 0.5, cutoff)[0].reshape(y1 - y0, x1 - x0)
            t = trans[y0:y1, x0:x1]
            value[:, y0:y1, x0:x1] += channel[:, sp.order[k], None, None] * (alpha * t)[None]
            trans[y0:y1, x0:x1] = t * (1.0 - alpha)
    value = np.clip(value, 0.0, 1.0)
    return value[0] if single else value


def fuse_maps(M1, M2) -> np.ndarray:
    M1 = np.asarray(M1)
    M2 = np.asarray(M2)
    if M1.shape != M2.shape:
        raise ValidationError(f"cannot fuse maps of shapes {M1.shape} and {M2.shape}")
    return np.maximum(M1, M2)


def binarize_and_label(M, M_struct, M_surf, threshold: float = 0.5):
    """``binary = M > threshold``; changed pixels labelled by the larger channel (ties -> structural)."""
    M = np.asarray(M)
    if not (M.shape == np.shape(M_struct) == np.shape(M_surf)):
        raise ValidationError("maps must share dimensions")
    binary = M > threshold
    labels = np.where(np.asarray(M_surf) > np.asarray(M_struct), LABEL_SURFACE, LABEL_STRUCTURAL)
    labels = np.where(binary, labels, 0).astype(np.uint8)
    return binary, labels
