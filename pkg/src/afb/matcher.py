"""Softmax-attention retrieval between a query feature grid and one bank.

For every grid position the bank entries are weighted by a softmax over raw
key dot products and the weighted sum of their values is returned, together
with per-entry counts of positions whose weight cleared the usage threshold.
Retrieval never mutates the bank; callers forward the counts to
``FeatureBank.record_usage``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend


@dataclass(frozen=True)
class QueryFeatures:
    """Key and value grids of the frame being segmented, shape (H, W, D)."""

    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.keys.ndim != 3 or self.values.ndim != 3:
            raise ValueError("query grids must be (H, W, D)")
        if self.keys.shape[:2] != self.values.shape[:2]:
            raise ValueError("key and value grids must share height/width")

    @property
    def grid_shape(self):
        return self.keys.shape[:2]


@dataclass(frozen=True)
class MatchResult:
    """Retrieved value grid, [query value | retrieved value] concatenation,
    and per-bank-entry usage counts."""

    retrieved: np.ndarray
    concat: np.ndarray
    usage_counts: np.ndarray


def match(query: QueryFeatures, bank, epsilon_l: float | None = None) -> MatchResult:
    """Retrieve, per grid position, the attention-weighted bank value.

    ``bank`` is anything exposing ``size``, ``keys`` (N, Dk) and ``values``
    (N, Dv); ``epsilon_l`` defaults to the bank's configured threshold.
    """
    if bank.size == 0:
        raise ValueError("empty feature bank")
    if epsilon_l is None:
        epsilon_l = bank.config.epsilon_l
    h, w = query.grid_shape
    dk = query.keys.shape[2]
    dv = query.values.shape[2]
    if bank.keys.shape[1] != dk:
        raise ValueError(f"query key dim {dk} != bank key dim {bank.keys.shape[1]}")
    if bank.values.shape[1] != dv:
        raise ValueError(f"query value dim {dv} != bank value dim {bank.values.shape[1]}")

    flat_keys = np.ascontiguousarray(query.keys.reshape(h * w, dk), dtype=np.float32)
    retrieved, counts = backend.attention_retrieve(flat_keys, bank.keys, bank.values, epsilon_l)
    retrieved = retrieved.reshape(h, w, dv)
    concat = np.concatenate([query.values.astype(np.float32, copy=False), retrieved], axis=2)
    return MatchResult(retrieved=retrieved, concat=concat, usage_counts=counts)
