"""Local refinement of ambiguous pixels.

Where the ambiguity map exceeds a threshold, each object's mask is nudged by
a confidence-gated similarity between the pixel's own feature and a
mask-weighted average of features in its neighborhood:

    reference_i(p) = sum_q M_i(q) r(q) / sum_q M_i(q)      (window around p)
    e_i(p)         = c_i(p) * score(r(p), reference_i(p)),  c_i = window max of M_i
    S_i(p)         = M_i(p) + U(p) * e_i(p)

The scorer is pluggable: a fixed cosine, or a two-parameter affine-in-cosine
map squashed by tanh that :func:`train_scorer` fits by gradient descent on
the combined segmentation loss of the refined maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import backend
from .uncertainty import ScoreMaps, UncertaintyMap, total_loss

SUPPORT_EPS = 1e-8

FIXED_COSINE = "fixed-cosine"
TRAINABLE_AFFINE = "trainable-affine"


@dataclass(frozen=True)
class Scorer:
    """Signed local-similarity scorer with output in [-1, 1]."""

    kind: str = FIXED_COSINE
    w: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in (FIXED_COSINE, TRAINABLE_AFFINE):
            raise ValueError(f"unknown scorer kind {self.kind!r}")

    @property
    def trainable(self) -> bool:
        return self.kind == TRAINABLE_AFFINE

    def score(self, cos: np.ndarray) -> np.ndarray:
        if self.kind == FIXED_COSINE:
            return cos
        return np.tanh(self.w * cos + self.b)


@dataclass(frozen=True)
class RefineConfig:
    radius: int = 1
    u_threshold: float = 0.7
    scorer: Scorer = field(default_factory=Scorer)

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if not (0.0 <= self.u_threshold <= 1.0):
            raise ValueError("u_threshold must be in [0, 1]")


@dataclass(frozen=True)
class RefineResult:
    """Final per-object maps: raw scores (unclamped), display masks clamped
    to [0, 1], and argmax labels taken on the raw scores."""

    scores: np.ndarray
    masks: np.ndarray
    labels: np.ndarray


def local_reference(masks: ScoreMaps, feats: np.ndarray, radius: int):
    """Mask-weighted window mean of pixel features, per object.

    Returns ``(refs, supported)`` with refs of shape (K, H, W, D); pixels
    whose window carries (near-)zero mask weight for an object get a zero
    reference and ``supported`` False there.
    """
    m = np.asarray(masks.masks, dtype=np.float64)
    r = np.asarray(feats, dtype=np.float64)
    if r.ndim != 3 or r.shape[:2] != m.shape[1:]:
        raise ValueError("pixel features must be (H, W, D) matching the masks")
    k = m.shape[0]
    d = r.shape[2]
    refs = np.empty((k,) + r.shape, dtype=np.float64)
    supported = np.empty((k,) + r.shape[:2], dtype=bool)
    for i in range(k):
        den = backend.box_sum(m[i], radius)
        ok = den >= SUPPORT_EPS
        safe = np.where(ok, den, 1.0)
        for c in range(d):
            num = backend.box_sum(m[i] * r[:, :, c], radius)
            refs[i, :, :, c] = np.where(ok, num / safe, 0.0)
        supported[i] = ok
    return refs, supported


def confidence_scores(masks: ScoreMaps, radius: int) -> np.ndarray:
    """Sliding-window maximum of each object mask, shape (K, H, W)."""
    m = np.asarray(masks.masks, dtype=np.float64)
    return np.stack([backend.window_max(m[i], radius) for i in range(m.shape[0])])


def refine(masks: ScoreMaps, u: UncertaintyMap, feats: np.ndarray, cfg: RefineConfig) -> RefineResult:
    """Apply one refinement pass to every pixel whose ambiguity exceeds the
    threshold; all other pixels keep their initial maps exactly."""
    m = np.asarray(masks.masks, dtype=np.float64)
    uu = np.asarray(u.u, dtype=np.float64)
    if uu.shape != m.shape[1:]:
        raise ValueError("uncertainty map shape must match the masks")
    gate = uu > cfg.u_threshold

    scores = m.copy()
    if gate.any():
        refs, supported = local_reference(masks, feats, cfg.radius)
        conf = confidence_scores(masks, cfg.radius)
        cos = _feature_cosines(np.asarray(feats, dtype=np.float64), refs)
        e = conf * cfg.scorer.score(cos)
        e[~supported] = 0.0
        scores = scores + np.where(gate[None], uu[None] * e, 0.0)

    labels = np.argmax(scores, axis=0).astype(np.int32)
    return RefineResult(
        scores=scores.astype(np.float32),
        masks=np.clip(scores, 0.0, 1.0).astype(np.float32),
        labels=labels,
    )


@dataclass(frozen=True)
class TrainItem:
    """One supervised frame for scorer fitting."""

    masks: ScoreMaps
    u: UncertaintyMap
    feats: np.ndarray
    gt_labels: np.ndarray


def train_scorer(dataset, cfg: RefineConfig, lambda_u: float = 0.5, steps: int = 100, lr: float = 0.1):
    """Fit the trainable scorer's (w, b) by gradient descent.

    Steps that would raise the loss are rejected and retried with a halved
    rate, so the recorded curve is non-increasing (within 1e-6 per accepted
    step).  Returns the fitted :class:`Scorer` and the loss curve, whose
    first entry is the starting loss.
    """
    if not cfg.scorer.trainable:
        raise ValueError("scorer not trainable")
    if not dataset:
        raise ValueError("empty training dataset")

    prepared = [_prepare_item(item, cfg) for item in dataset]
    w = float(cfg.scorer.w)
    b = float(cfg.scorer.b)
    loss, gw, gb = _loss_and_grad(prepared, w, b, lambda_u)
    curve = [loss]
    step_lr = float(lr)
    for _ in range(int(steps)):
        if step_lr == 0.0 or (gw == 0.0 and gb == 0.0):
            curve.append(loss)
            continue
        accepted = False
        for _ in range(40):
            cand_w = w - step_lr * gw
            cand_b = b - step_lr * gb
            cand_loss, cand_gw, cand_gb = _loss_and_grad(prepared, cand_w, cand_b, lambda_u)
            if cand_loss <= loss + 1e-6:
                w, b, loss, gw, gb = cand_w, cand_b, cand_loss, cand_gw, cand_gb
                accepted = True
                break
            step_lr *= 0.5
        curve.append(loss)
        if not accepted:
            break
    return replace(cfg.scorer, w=w, b=b), curve


def scorer_loss_grad(dataset, cfg: RefineConfig, w: float, b: float, lambda_u: float = 0.5):
    """Loss and (dw, db) at given scorer parameters; the finite-difference
    check in the tests drives this directly."""
    prepared = [_prepare_item(item, cfg) for item in dataset]
    return _loss_and_grad(prepared, float(w), float(b), lambda_u)


# -- internals ---------------------------------------------------------------


def _feature_cosines(r: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """cos(r(p), refs_i(p)) per object and pixel; zero where either norm is."""
    dots = np.einsum("hwd,khwd->khw", r, refs)
    rn = np.linalg.norm(r, axis=2)
    fn = np.linalg.norm(refs, axis=3)
    denom = rn[None] * fn
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = dots / denom
    cos[~np.isfinite(cos)] = 0.0
    return cos


def _prepare_item(item: TrainItem, cfg: RefineConfig):
    m = np.asarray(item.masks.masks, dtype=np.float64)
    uu = np.asarray(item.u.u, dtype=np.float64)
    gate = uu > cfg.u_threshold
    refs, supported = local_reference(item.masks, item.feats, cfg.radius)
    conf = confidence_scores(item.masks, cfg.radius)
    cos = _feature_cosines(np.asarray(item.feats, dtype=np.float64), refs)
    # Static factor multiplying the scorer output in S = M + U * c * score.
    factor = np.where(gate[None] & supported, uu[None] * conf, 0.0)
    return m, cos, factor, np.asarray(item.gt_labels)


def _loss_and_grad(prepared, w: float, b: float, lambda_u: float):
    total = 0.0
    gw = 0.0
    gb = 0.0
    for m, cos, factor, labels in prepared:
        t = np.tanh(w * cos + b)
        scores = m + factor * t
        loss, grad_s = total_loss(scores, labels, lambda_u)
        dtanh = factor * (1.0 - t * t)
        gw += float((grad_s * dtanh * cos).sum())
        gb += float((grad_s * dtanh).sum())
        total += loss
    n = len(prepared)
    return total / n, gw / n, gb / n
