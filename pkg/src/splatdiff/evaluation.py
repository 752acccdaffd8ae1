"""Detection and routing metrics, fixed/oracle thresholding and the quantile sweep harness.

IoU and F1 are computed on the changed class with pixel counts pooled over
all views of an instance; the per-view mean is reported alongside.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError
from .splat_io import LABEL_STRUCTURAL, LABEL_SURFACE

DEFAULT_GRID = np.arange(1, 256) / 256.0
SWEEP_GRID = np.round(np.arange(1, 20) * 0.05, 2)
SWEEP_AXES = ("geo_quantile", "color_quantile", "conf_quantile")
SWEEP_DEFAULTS = {"geo_quantile": 0.75, "color_quantile": 0.50, "conf_quantile": 0.25}


@dataclass
class DetectionMetrics:
    miou: float
    f1: float
    threshold_used: Optional[float] = None
    per_view_iou: list = field(default_factory=list)
    per_view_f1: list = field(default_factory=list)

    @property
    def mean_view_iou(self) -> float:
        return float(np.mean(self.per_view_iou)) if self.per_view_iou else float("nan")

    def to_dict(self):
        return {
            "miou": self.miou, "f1": self.f1, "threshold_used": self.threshold_used,
            "mean_view_iou": self.mean_view_iou,
            "per_view_iou": list(self.per_view_iou), "per_view_f1": list(self.per_view_f1),
        }


@dataclass
class RoutingMetrics:
    balanced_accuracy: float
    structural_precision: Optional[float]
    structural_recall: Optional[float]
    surface_precision: Optional[float]
    surface_recall: Optional[float]
    n_pixels: int = 0

    def to_dict(self):
        return dict(self.__dict__)


def _iou_f1(tp, fp, fn):
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return tp / (tp + fp + fn), 2 * tp / (2 * tp + fp + fn)


def _as_views(images) -> list:
    if isinstance(images, dict):
        return [np.asarray(images[k]) for k in sorted(images)]
    if isinstance(images, np.ndarray) and images.ndim == 2:
        return [images]
    return [np.asarray(x) for x in images]


def _paired(a, b):
    if isinstance(a, dict) and isinstance(b, dict):
        if set(a) != set(b):
            raise ValidationError("prediction and ground truth cover different views")
    a, b = _as_views(a), _as_views(b)
    if len(a) != len(b):
        raise ValidationError(f"{len(a)} predicted views vs {len(b)} ground-truth views")
    for x, y in zip(a, b):
        if x.shape != y.shape:
            raise ValidationError(f"view dimension mismatch {x.shape} vs {y.shape}")
    return a, b


def detection_metrics(pred_binary, gt_binary, threshold_used=None) -> DetectionMetrics:
    preds, gts = _paired(pred_binary, gt_binary)
    TP = FP = FN = 0
    ious, f1s = [], []
    for p, g in zip(preds, gts):
        p = p.astype(bool)
        g = g.astype(bool)
        tp = int(np.count_nonzero(p & g))
        fp = int(np.count_nonzero(p & ~g))
        fn = int(np.count_nonzero(~p & g))
        TP, FP, FN = TP + tp, FP + fp, FN + fn
        i, f = _iou_f1(tp, fp, fn)
        ious.append(i)
        f1s.append(f)
    miou, f1 = _iou_f1(TP, FP, FN)
    return DetectionMetrics(miou, f1, threshold_used, ious, f1s)


def threshold_metrics(score_maps, gt_binary, threshold: float = 0.5) -> DetectionMetrics:
    maps, gts = _paired(score_maps, gt_binary)
    return detection_metrics([m > threshold for m in maps], gts, threshold)


def oracle_threshold(score_maps, gt_binary, grid=None):
    """Exhaustive search for the pooled-IoU maximising threshold; ties go to the smallest."""
    grid = DEFAULT_GRID if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.size == 0 or np.any(grid <= 0) or np.any(grid >= 1):
        raise ValidationError("threshold grid must be a non-empty subset of (0, 1)")
    grid = np.sort(grid)
    maps, gts = _paired(score_maps, gt_binary)
    s = np.concatenate([m.ravel() for m in maps]).astype(np.float64)
    g = np.concatenate([x.ravel() for x in gts]).astype(bool)
    # counts of gt-positive / negative pixels with score > t, for all t at once
    pos = np.sort(s[g])
    neg = np.sort(s[~g])
    tp = len(pos) - np.searchsorted(pos, grid, side="right")
    fp = len(neg) - np.searchsorted(neg, grid, side="right")
    fn = len(pos) - tp
    denom = tp + fp + fn
    iou = np.where(denom == 0, 1.0, tp / np.maximum(denom, 1))
    best = int(np.argmax(iou))  # first occurrence = smallest maximiser
    t = float(grid[best])
    return t, threshold_metrics(maps, gts, t)


def _routing_counts(pl, gl):
    out = {}
    for cls in (LABEL_STRUCTURAL, LABEL_SURFACE):
        tp = int(np.count_nonzero((pl == cls) & (gl == cls)))
        n_gt = int(np.count_nonzero(gl == cls))
        n_pred = int(np.count_nonzero(pl == cls))
        out[cls] = (tp / n_gt if n_gt else None, tp / n_pred if n_pred else None)
    return out


def routing_metrics(pred_labels, gt_labels, condition: str = "both") -> RoutingMetrics:
    """Balanced accuracy of structural vs surface labels on changed pixels.

    ``condition`` picks the evaluated pixels: ``"both"`` (changed in prediction
    and ground truth), ``"gt"`` (changed in ground truth; undetected pixels
    count as misrouted) or ``"pred"``.
    """
    preds, gts = _paired(pred_labels, gt_labels)
    pl = np.concatenate([p.ravel() for p in preds]).astype(np.int64)
    gl = np.concatenate([g.ravel() for g in gts]).astype(np.int64)
    for lab in (pl, gl):
        if lab.size and (lab.min() < 0 or lab.max() > LABEL_SURFACE):
            raise ValidationError("labels must be 0 (unchanged), 1 (structural) or 2 (surface)")
    if condition == "both":
        m = (pl > 0) & (gl > 0)
    elif condition == "gt":
        m = gl > 0
    elif condition == "pred":
        m = pl > 0
    else:
        raise ValidationError(f"unknown routing condition {condition!r}")
    pl, gl = pl[m], gl[m]
    c = _routing_counts(pl, gl)
    recalls = [r for r, _ in c.values() if r is not None]
    ba = float(np.mean(recalls)) if recalls else float("nan")
    return RoutingMetrics(
        ba, c[LABEL_STRUCTURAL][1], c[LABEL_STRUCTURAL][0], c[LABEL_SURFACE][1], c[LABEL_SURFACE][0], int(m.sum())
    )


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC needs both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class SweepRow:
    axis: str
    quantile: float
    fixed_miou: float
    oracle_miou: float
    oracle_threshold: float
    is_default: bool


def quantile_sweep(
    run: Callable[[dict], dict],
    gt_binary,
    axis: str,
    grid: Sequence[float] = SWEEP_GRID,
    threshold: float = 0.5,
    workers: int = 1,
) -> list:
    """Run ``run({axis: q})`` for each grid point; it must return ``{view_id: score map}``.

    Grid points are independent jobs and are evaluated in a thread pool when
    ``workers > 1``; rows come back in grid order regardless.
    """
    if axis not in SWEEP_AXES:
        raise ValidationError(f"sweep axis must be one of {SWEEP_AXES}")

    def job(q):
        q = float(q)
        maps = run({axis: q})
        fixed = threshold_metrics(maps, gt_binary, threshold)
        t, orc = oracle_threshold(maps, gt_binary)
        return SweepRow(axis, q, fixed.miou, orc.miou, t, bool(np.isclose(q, SWEEP_DEFAULTS[axis])))

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(job, grid))
    return [job(q) for q in grid]


SWEEP_COLUMNS = ("axis", "quantile", "fixed_miou", "oracle_miou", "oracle_threshold", "is_default")


def sweep_to_csv(rows, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([r.axis, f"{r.quantile:.2f}", repr(float(r.fixed_miou)), repr(float(r.oracle_miou)),
                    repr(float(r.oracle_threshold)), int(r.is_default)])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as f:
            f.write(text)
    return text
