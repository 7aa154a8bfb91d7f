"""Segmentation quality scores: region overlap J, boundary accuracy F, and
sequence aggregation (mean / recall / decay).

Boundary accuracy follows the common dilated-boundary approximation: contour
pixels (4-connectivity, image border counts as outside) of one mask are
matched to the other's contour if they lie within a pixel tolerance, and the
precision/recall harmonic mean is reported.  The default tolerance is
ceil(0.8% of the image diagonal).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt


def jaccard(pred, gt) -> float:
    """Intersection over union of two binary masks; 1.0 when both empty."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def boundary_mask(mask) -> np.ndarray:
    """Contour pixels: mask pixels with a 4-neighbor outside the mask
    (the image border counts as outside)."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def default_boundary_tolerance(shape) -> int:
    h, w = shape
    return int(math.ceil(0.008 * math.hypot(h, w)))


def boundary_f(pred, gt, tolerance_px: int | None = None) -> float:
    """Harmonic mean of boundary precision and recall at a pixel tolerance."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if tolerance_px is None:
        tolerance_px = default_boundary_tolerance(p.shape)
    if tolerance_px < 0:
        raise ValueError("tolerance must be >= 0")

    pb = boundary_mask(p)
    gb = boundary_mask(g)
    np_b = int(pb.sum())
    ng_b = int(gb.sum())
    if np_b == 0 and ng_b == 0:
        return 1.0
    if np_b == 0 or ng_b == 0:
        return 0.0

    dist_to_g = distance_transform_edt(~gb)
    dist_to_p = distance_transform_edt(~pb)
    precision = float((dist_to_g[pb] <= tolerance_px).mean())
    recall = float((dist_to_p[gb] <= tolerance_px).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class Aggregates:
    """Sequence-level mean, recall (fraction of per-object sequence means
    above tau), and decay (first temporal quartile mean minus last)."""

    mean: float
    recall: float
    decay: float


def aggregate(per_frame_scores, tau: float = 0.5) -> Aggregates:
    """Aggregate per-frame scores; rows are objects, columns frames.

    A 1-D input is treated as a single object.  Decay uses contiguous
    quartile chunks of length ceil(T/4), so a single frame decays by 0.
    """
    scores = np.asarray(per_frame_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty score list")
    if scores.ndim == 1:
        scores = scores[None, :]
    if scores.ndim != 2:
        raise ValueError("scores must be 1-D or (objects, frames)")

    t = scores.shape[1]
    k = max(1, math.ceil(t / 4))
    per_object_mean = scores.mean(axis=1)
    decay = float((scores[:, :k].mean(axis=1) - scores[:, t - k :].mean(axis=1)).mean())
    return Aggregates(
        mean=float(scores.mean()),
        recall=float((per_object_mean > tau).mean()),
        decay=decay,
    )


@dataclass(frozen=True)
class SequenceScores:
    """Per-frame J/F matrices (objects x frames) plus their aggregates."""

    j: np.ndarray
    f: np.ndarray
    j_agg: Aggregates
    f_agg: Aggregates

    @property
    def jf_mean(self) -> float:
        return 0.5 * (self.j_agg.mean + self.f_agg.mean)


def evaluate_sequence(pred_masks, gt_masks, num_objects: int, tolerance_px=None, tau: float = 0.5) -> SequenceScores:
    """Score predicted label grids against ground truth, object by object.

    ``pred_masks`` and ``gt_masks`` are parallel lists of integer label
    grids; object indices 1..num_objects are scored (background excluded).
    """
    if len(pred_masks) != len(gt_masks):
        raise ValueError("prediction/ground-truth frame counts differ")
    if not pred_masks:
        raise ValueError("no frames to evaluate")
    if num_objects < 1:
        raise ValueError("need at least one object")
    n_t = len(pred_masks)
    j = np.zeros((num_objects, n_t))
    f = np.zeros((num_objects, n_t))
    for t, (pred, gt) in enumerate(zip(pred_masks, gt_masks)):
        for i in range(1, num_objects + 1):
            j[i - 1, t] = jaccard(pred == i, gt == i)
            f[i - 1, t] = boundary_f(pred == i, gt == i, tolerance_px)
    return SequenceScores(
        j=j, f=f, j_agg=aggregate(j, tau), f_agg=aggregate(f, tau)
    )


def report_dict(scores: SequenceScores) -> dict:
    """JSON-ready report: {J: {M, R, D}, F: {M, R, D}, JF_M, per_object}."""
    return {
        "J": {"M": scores.j_agg.mean, "R": scores.j_agg.recall, "D": scores.j_agg.decay},
        "F": {"M": scores.f_agg.mean, "R": scores.f_agg.recall, "D": scores.f_agg.decay},
        "JF_M": scores.jf_mean,
        "per_object": {
            str(i + 1): {
                "J_M": float(scores.j[i].mean()),
                "F_M": float(scores.f[i].mean()),
            }
            for i in range(scores.j.shape[0])
        },
    }
