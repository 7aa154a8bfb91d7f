"""Pure-numpy implementations of the hot kernels.

Same contracts as the compiled versions in ``_kernels.pyx``; :mod:`afb.backend`
picks whichever is available.  All reductions accumulate in float64 so both
backends agree to within a few ulps.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import maximum_filter

BACKEND = "python"

# Row blocks keep the (P, N) weight matrix small on long grids.
_CHUNK = 4096


def attention_retrieve(query_keys, bank_keys, bank_values, eps_l):
    """Softmax-attention retrieval of bank values for every query position.

    query_keys (P, Dk) f32, bank_keys (N, Dk) f32, bank_values (N, Dv) f32.
    Returns (retrieved (P, Dv) f32, counts (N,) i64) where counts[j] is the
    number of positions whose softmax weight on entry j exceeded eps_l.
    """
    qk = np.asarray(query_keys, dtype=np.float64)
    bk = np.asarray(bank_keys, dtype=np.float64)
    bv = np.asarray(bank_values, dtype=np.float64)
    p = qk.shape[0]
    n = bk.shape[0]
    retrieved = np.empty((p, bv.shape[1]), dtype=np.float32)
    counts = np.zeros(n, dtype=np.int64)
    for lo in range(0, p, _CHUNK):
        hi = min(lo + _CHUNK, p)
        logits = qk[lo:hi] @ bk.T
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        counts += (w > eps_l).sum(axis=0)
        retrieved[lo:hi] = (w @ bv).astype(np.float32)
    return retrieved, counts


def cosine_best_match(new_keys, bank_keys):
    """Index and value of the most cosine-similar bank key per new key.

    Zero-norm rows on either side never match (cosine treated as -inf).
    Ties resolve to the smallest bank index.  An empty bank yields index -1
    and -inf similarity for every new key.
    """
    nk = np.asarray(new_keys, dtype=np.float64)
    bk = np.asarray(bank_keys, dtype=np.float64)
    m = nk.shape[0]
    if bk.shape[0] == 0 or m == 0:
        return (np.full(m, -1, dtype=np.int64), np.full(m, -np.inf, dtype=np.float64))
    nn = np.linalg.norm(nk, axis=1)
    bn = np.linalg.norm(bk, axis=1)
    sims = nk @ bk.T
    with np.errstate(divide="ignore", invalid="ignore"):
        sims /= nn[:, None]
        sims /= bn[None, :]
    sims[~np.isfinite(sims)] = -np.inf
    idx = np.argmax(sims, axis=1).astype(np.int64)
    best = sims[np.arange(m), idx]
    idx[~np.isfinite(best)] = -1
    return idx, best


def box_sum(arr, radius):
    """Sum of each (2r+1)^2 window, clipped at the borders. f64 in, f64 out."""
    a = np.asarray(arr, dtype=np.float64)
    h, w = a.shape
    ps = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(a, axis=0, out=ps[1:, 1:])
    np.cumsum(ps[1:, 1:], axis=1, out=ps[1:, 1:])
    y = np.arange(h)
    x = np.arange(w)
    y0 = np.clip(y - radius, 0, h)
    y1 = np.clip(y + radius + 1, 0, h)
    x0 = np.clip(x - radius, 0, w)
    x1 = np.clip(x + radius + 1, 0, w)
    return (
        ps[np.ix_(y1, x1)] - ps[np.ix_(y0, x1)] - ps[np.ix_(y1, x0)] + ps[np.ix_(y0, x0)]
    )


def window_max(arr, radius):
    """Max of each (2r+1)^2 window, clipped at the borders. f64 in, f64 out."""
    a = np.asarray(arr, dtype=np.float64)
    size = 2 * radius + 1
    return maximum_filter(a, size=size, mode="constant", cval=-np.inf)
