"""Mask normalization, per-pixel ambiguity, and the segmentation losses.

The ambiguity of a pixel is ``U = exp(1 - m1 / (m2 + eps))`` where m1 and m2
are its two largest object likelihoods; U is 1 exactly at ties and decays
toward 0 as the winner pulls away.  The confidence loss is the Euclidean
norm of U over all pixels; the combined training loss averages cross-entropy
over pixels and adds ``lambda_u`` times the RMS-normalized confidence term
so magnitudes do not scale with resolution.

Gradients here are fully analytic (and exercised against central finite
differences); everything accumulates in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_DIV = 1e-12

DEFAULT_LAMBDA_U = 0.5


@dataclass(frozen=True)
class ScoreMaps:
    """Per-object likelihood maps (index 0 is background), shape (K, H, W).

    ``masks`` sums to 1 across objects at every pixel; ``logits`` keeps the
    pre-softmax maps when they are known (losses want them).
    """

    masks: np.ndarray
    logits: np.ndarray | None = None

    def __post_init__(self):
        if self.masks.ndim != 3 or self.masks.shape[0] < 2:
            raise ValueError("score maps need at least 2 object maps of shape (K, H, W)")

    @property
    def num_maps(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self):
        return self.masks.shape[1:]


@dataclass(frozen=True)
class UncertaintyMap:
    """Per-pixel ambiguity in (0, 1]."""

    u: np.ndarray

    @property
    def shape(self):
        return self.u.shape


def normalize(logits) -> ScoreMaps:
    """Softmax across the object axis of stacked logit maps (K, H, W)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 3 or z.shape[0] < 2:
        raise ValueError("normalize needs at least 2 logit maps")
    masks = _softmax_maps(z)
    return ScoreMaps(masks=masks.astype(np.float32), logits=z.astype(np.float32))


def uncertainty_map(maps: ScoreMaps) -> UncertaintyMap:
    """Ambiguity from the ratio of the top-two likelihoods per pixel."""
    m = np.asarray(maps.masks, dtype=np.float64)
    top = -np.partition(-m, 1, axis=0)
    ratio = top[0] / (top[1] + EPS_DIV)
    return UncertaintyMap(u=np.exp(1.0 - ratio))


def confidence_loss(u: UncertaintyMap) -> float:
    """Euclidean norm of the ambiguity map over all pixels."""
    return float(np.linalg.norm(np.asarray(u.u, dtype=np.float64).ravel()))


def cross_entropy(logits, gt_labels) -> float:
    """Pixel-mean cross entropy of logit maps against integer labels."""
    loss, _ = cross_entropy_grad(logits, gt_labels)
    return loss


def cross_entropy_grad(logits, gt_labels):
    """Cross entropy (pixel mean, max-subtraction stabilized) and its
    gradient with respect to the logits."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(gt_labels)
    if z.ndim != 3:
        raise ValueError("logits must be (K, H, W)")
    k = z.shape[0]
    if labels.shape != z.shape[1:]:
        raise ValueError("label grid shape must match logits")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k - 1}]")

    zmax = z.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=0)) + zmax[0]
    picked = np.take_along_axis(z, labels[None], axis=0)[0]
    n_pix = labels.size
    loss = float((lse - picked).sum() / n_pix)

    grad = _softmax_maps(z)
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, labels[None], 1.0, axis=0)
    grad = (grad - onehot) / n_pix
    return loss, grad


def confidence_loss_grad(logits):
    """Euclidean-norm confidence loss computed from logits, with gradient.

    The chain runs through the per-pixel softmax, the top-two ratio and the
    exponential.  At exact top-two ties the lexicographically-first argmax
    branch supplies the subgradient.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 3 or z.shape[0] < 2:
        raise ValueError("logits must be (K, H, W) with K >= 2")
    m = _softmax_maps(z)
    i1, i2, m1, m2 = _top_two(m)
    denom = m2 + EPS_DIV
    u = np.exp(1.0 - m1 / denom)
    norm = float(np.sqrt((u * u).sum()))

    if norm == 0.0:
        return 0.0, np.zeros_like(z)

    g_u = u / norm
    coef1 = g_u * (-u) / denom            # dL/dm1
    coef2 = g_u * u * m1 / (denom * denom)  # dL/dm2

    # Backprop through softmax with dL/dm nonzero only at the top-two maps.
    dm = np.zeros_like(m)
    np.put_along_axis(dm, i1[None], coef1[None], axis=0)
    np.put_along_axis(dm, i2[None], coef2[None], axis=0)
    inner = (dm * m).sum(axis=0, keepdims=True)
    grad = m * (dm - inner)
    return norm, grad


def total_loss(logits, gt_labels, lambda_u: float = DEFAULT_LAMBDA_U):
    """Combined loss (cross entropy + weighted RMS confidence) and gradient.

    The confidence norm is divided by sqrt(#pixels) so the weighting stays
    resolution-independent, matching the pixel-mean cross entropy.
    """
    z = np.asarray(logits, dtype=np.float64)
    ce, ce_grad = cross_entropy_grad(z, gt_labels)
    conf, conf_grad = confidence_loss_grad(z)
    root_n = float(np.sqrt(z.shape[1] * z.shape[2]))
    loss = ce + lambda_u * conf / root_n
    grad = ce_grad + (lambda_u / root_n) * conf_grad
    return loss, grad


def _softmax_maps(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def _top_two(m: np.ndarray):
    """Indices and values of the two largest maps per pixel.

    Ties resolve to the smaller map index for the winner and then for the
    runner-up (stable order), keeping the subgradient branch deterministic.
    """
    order = np.argsort(-m, axis=0, kind="stable")
    i1 = order[0]
    i2 = order[1]
    m1 = np.take_along_axis(m, i1[None], axis=0)[0]
    m2 = np.take_along_axis(m, i2[None], axis=0)[0]
    return i1, i2, m1, m2
