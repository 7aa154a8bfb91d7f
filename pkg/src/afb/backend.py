"""Kernel backend selection: compiled extension when built, numpy otherwise.

``AFB_BACKEND`` forces the choice: ``auto`` (default), ``compiled``, or
``python``.  Forcing ``compiled`` raises at import if the extension is
missing rather than silently falling back.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

_FORCED = os.environ.get("AFB_BACKEND", "auto").lower()
if _FORCED not in ("auto", "compiled", "python"):
    raise RuntimeError(f"AFB_BACKEND must be auto|compiled|python, got {_FORCED!r}")

_compiled = None
if _FORCED in ("auto", "compiled"):
    try:
        from . import _kernels as _compiled  # type: ignore[no-redef]
    except ImportError:
        if _FORCED == "compiled":
            raise RuntimeError(
                "AFB_BACKEND=compiled but the extension is not built; "
                "run `python setup.py build_ext --inplace`"
            )

_impl = _compiled if _compiled is not None else _kernels_py


def name() -> str:
    return "compiled" if _impl is _compiled and _compiled is not None else "python"


def available() -> list:
    return ["python"] + (["compiled"] if _compiled is not None else [])


def use(which: str) -> str:
    """Switch backends at runtime (tests and benchmarks). Returns prior name."""
    global _impl
    prior = name()
    if which == "python":
        _impl = _kernels_py
    elif which == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled backend not built")
        _impl = _compiled
    else:
        raise ValueError(f"unknown backend {which!r}")
    return prior


def attention_retrieve(query_keys, bank_keys, bank_values, eps_l):
    qk = np.ascontiguousarray(query_keys, dtype=np.float32)
    bk = np.ascontiguousarray(bank_keys, dtype=np.float32)
    bv = np.ascontiguousarray(bank_values, dtype=np.float32)
    return _impl.attention_retrieve(qk, bk, bv, float(eps_l))


def cosine_best_match(new_keys, bank_keys):
    nk = np.ascontiguousarray(new_keys, dtype=np.float32)
    bk = np.ascontiguousarray(bank_keys, dtype=np.float32)
    return _impl.cosine_best_match(nk, bk)


def box_sum(arr, radius):
    a = np.ascontiguousarray(arr, dtype=np.float64)
    return _impl.box_sum(a, int(radius))


def window_max(arr, radius):
    a = np.ascontiguousarray(arr, dtype=np.float64)
    return _impl.window_max(a, int(radius))
