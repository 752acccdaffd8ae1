"""Confidence weighting, saturated score combination and structural / surface channels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .drift_model import quantile
from .errors import ValidationError


@dataclass(eq=False)
class PrimitiveScores:
    delta_geo: np.ndarray
    delta_app: np.ndarray
    omega: np.ndarray
    delta_combined: np.ndarray
    residual_surf: np.ndarray
    primitive_id: np.ndarray = None

    def __len__(self):
        return len(self.delta_geo)


def confidence_weight(trace_H, q_ref):
    """``sigmoid(ln tr(H) - ln q_ref)``; equals 0.5 exactly at the reference."""
    trace_H = np.asarray(trace_H, dtype=np.float64)
    if np.any(trace_H <= 0) or not q_ref > 0:
        raise ValidationError("confidence weight needs positive Fisher traces")
    x = np.log(trace_H) - np.log(q_ref)
    out = 1.0 / (1.0 + np.exp(-x))
    return float(out) if out.ndim == 0 else out


def scene_confidence(trace_H, q: float = 0.25):
    """Weights for a whole scene, referenced to its own ``q`` quantile of Fisher traces."""
    ref = quantile(trace_H, q)
    return confidence_weight(trace_H, ref), ref


def combine_scores(delta_geo, delta_app, omega):
    out = np.asarray(omega, dtype=np.float64) * np.minimum(
        np.asarray(delta_geo, dtype=np.float64) + np.asarray(delta_app, dtype=np.float64), 1.0
    )
    return float(out) if out.ndim == 0 else out


def disambiguation_channels(delta_geo, delta_app):
    """``(structural, surface)`` = ``(delta_geo, max(delta_app - delta_geo, 0))``."""
    g = np.asarray(delta_geo, dtype=np.float64)
    a = np.asarray(delta_app, dtype=np.float64)
    surf = np.maximum(a - g, 0.0)
    if g.ndim == 0:
        return float(g), float(surf)
    return g.copy(), surf


def aggregate(delta_geo, delta_app, trace_H, conf_quantile: float = 0.25, primitive_id=None):
    """All per-primitive outputs for one scene. Returns ``(PrimitiveScores, q_ref)``."""
    omega, ref = scene_confidence(trace_H, conf_quantile)
    omega = np.atleast_1d(omega)
    _, surf = disambiguation_channels(delta_geo, delta_app)
    scores = PrimitiveScores(
        delta_geo=np.asarray(delta_geo, dtype=np.float64),
        delta_app=np.asarray(delta_app, dtype=np.float64),
        omega=omega,
        delta_combined=np.atleast_1d(combine_scores(delta_geo, delta_app, omega)),
        residual_surf=np.atleast_1d(surf),
        primitive_id=np.arange(len(omega)) if primitive_id is None else np.asarray(primitive_id),
    )
    return scores, ref
