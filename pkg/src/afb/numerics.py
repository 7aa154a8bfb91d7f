"""Dense-array substrate shared by every stage: softmax, cosine similarity,
bilinear resampling, and a deterministic splittable RNG.

Conventions used throughout the package:

* feature vectors and feature grids are float32 (memory economy is the whole
  point of a bounded feature store); reductions that feed losses, gradients
  or test assertions accumulate in float64,
* grids are plain numpy arrays indexed ``[row, col]`` with an optional
  trailing channel axis.
"""

from __future__ import annotations

import numpy as np

__all__ = ["softmax", "cosine", "bilinear_upsample", "Rng"]


def softmax(scores) -> np.ndarray:
    """Stabilized softmax of a 1-D score vector (max is subtracted first).

    Raises ``ValueError("empty softmax")`` for empty input and rejects
    non-finite components.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty softmax")
    if s.ndim != 1:
        raise ValueError("softmax expects a 1-D vector")
    if not np.all(np.isfinite(s)):
        raise ValueError("softmax input must be finite")
    e = np.exp(s - s.max())
    return (e / e.sum()).astype(np.float32)


def cosine(a, b) -> float:
    """Cosine similarity of two equal-dimension vectors.

    Raises ``ValueError("zero-norm vector")`` when either norm vanishes.
    """
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.ndim != 1 or vb.ndim != 1:
        raise ValueError("cosine expects 1-D vectors")
    if va.shape != vb.shape:
        raise ValueError("cosine dimension mismatch")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-norm vector")
    return float(va @ vb / (na * nb))


def bilinear_upsample(src, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear upsampling of a scalar or vector grid.

    ``src`` is ``(H, W)`` or ``(H, W, C)``; output dims must be at least the
    source dims.  Corner alignment maps source corners onto output corners,
    so a constant grid stays constant and a 1x2 ramp becomes a linear ramp.
    """
    a = np.asarray(src)
    if a.ndim not in (2, 3):
        raise ValueError("grid must be (H, W) or (H, W, C)")
    h, w = a.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("empty grid")
    if out_h <= 0 or out_w <= 0:
        raise ValueError("zero output size")
    if out_h < h or out_w < w:
        raise ValueError("output must be at least the source size")

    work = a.astype(np.float64, copy=False)
    ys = _corner_coords(h, out_h)
    xs = _corner_coords(w, out_w)
    y0 = np.minimum(np.floor(ys).astype(np.int64), h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    if a.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]

    top = work[np.ix_(y0, x0)] * (1.0 - fx) + work[np.ix_(y0, x1)] * fx
    bot = work[np.ix_(y1, x0)] * (1.0 - fx) + work[np.ix_(y1, x1)] * fx
    out = top * (1.0 - fy) + bot * fy
    if a.dtype == np.float32:
        return out.astype(np.float32)
    return out


def _corner_coords(n_src: int, n_out: int) -> np.ndarray:
    if n_out == 1 or n_src == 1:
        return np.zeros(n_out, dtype=np.float64)
    return np.arange(n_out, dtype=np.float64) * ((n_src - 1) / (n_out - 1))


class Rng:
    """Deterministic splittable RNG on top of the counter-based Philox engine.

    A child stream obtained via :meth:`split` is a pure function of
    ``(seed, path)`` — independent of how many draws the parent has made —
    so work farmed out to parallel workers sees the same streams as a serial
    run.  Instances are single-owner: share by splitting, not by reference.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._path = tuple(int(k) for k in _path)
        ss = np.random.SeedSequence(entropy=(self.seed,) + self._path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, key: int) -> "Rng":
        """Derive an independent child stream identified by ``key``."""
        return Rng(self.seed, self._path + (int(key),))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self._path})"
