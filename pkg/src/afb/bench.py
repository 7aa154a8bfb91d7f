"""Feature-bank micro-benchmarks on synthetic key streams.

Three stream shapes probe the merge/evict behaviour: ``clustered`` draws
features around a handful of directions (intra-cluster cosines sit above the
merge threshold by design), ``drifting`` slowly rotates those directions,
and ``uniform`` draws isotropic features whose pairwise cosines concentrate
near zero.  Each feature carries the label of its source cluster so
retrieval agreement against an unbounded store-all oracle can be measured on
held-out queries.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import backend
from .feature_bank import BankConfig, FeatureBank
from .numerics import Rng

STREAMS = ("clustered", "drifting", "uniform")


@dataclass(frozen=True)
class StreamSpec:
    kind: str = "clustered"
    frames: int = 200
    features_per_frame: int = 50
    dim: int = 32
    clusters: int = 8
    sigma: float = 0.05
    drift_step: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STREAMS:
            raise ValueError(f"stream kind must be one of {STREAMS}")


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def _centers(spec: StreamSpec, rng: Rng):
    base = _unit_rows(rng.split(1).normal(size=(spec.clusters, spec.dim)))
    drift_dir = _unit_rows(rng.split(2).normal(size=(spec.clusters, spec.dim)))
    return base, drift_dir


def stream_batch(spec: StreamSpec, frame: int):
    """(keys, values, labels) for one frame of the stream; frame is 1-based."""
    rng = Rng(spec.seed).split(100 + frame)
    n = spec.features_per_frame
    if spec.kind == "uniform":
        keys = rng.normal(size=(n, spec.dim))
        # Unique labels: agreement then means the very same feature survived.
        labels = (frame * 1_000_000 + np.arange(n)).astype(np.int64)
    else:
        base, drift_dir = _centers(spec, Rng(spec.seed))
        centers = base
        if spec.kind == "drifting":
            centers = _unit_rows(base + spec.drift_step * (frame - 1) * drift_dir)
        labels = rng.integers(0, spec.clusters, size=n).astype(np.int64)
        keys = centers[labels] + spec.sigma * rng.normal(size=(n, spec.dim))
    values = keys.copy()
    return keys.astype(np.float32), values.astype(np.float32), labels


def held_out_queries(spec: StreamSpec, count: int):
    """Fresh queries from the stream's final-state distribution."""
    rng = Rng(spec.seed).split(999)
    if spec.kind == "uniform":
        return rng.normal(size=(count, spec.dim)).astype(np.float32)
    base, drift_dir = _centers(spec, Rng(spec.seed))
    centers = base
    if spec.kind == "drifting":
        centers = _unit_rows(base + spec.drift_step * (spec.frames - 1) * drift_dir)
    labels = rng.integers(0, spec.clusters, size=count)
    q = centers[labels] + spec.sigma * rng.normal(size=(count, spec.dim))
    return q.astype(np.float32)


def run_bank_bench(spec: StreamSpec, bank_config: BankConfig, queries: int = 256) -> dict:
    """Stream batches through absorb/evict and report merge/eviction/agreement
    statistics plus absorb throughput."""
    keys0, values0, labels0 = stream_batch(spec, 1)
    bank = FeatureBank(
        bank_config,
        (keys0[: bank_config.budget], values0[: bank_config.budget]),
        frame=1,
    )
    entry_labels = {int(i): int(lab) for i, lab in zip(bank.ids, labels0[: bank_config.budget])}

    all_keys = [keys0]
    all_labels = [labels0]
    total = keys0.shape[0]
    merged = 0
    elapsed = 0.0
    for t in range(2, spec.frames + 1):
        keys, values, labels = stream_batch(spec, t)
        tic = time.perf_counter()
        report = bank.absorb((keys, values), frame=t)
        elapsed += time.perf_counter() - tic
        total += keys.shape[0]
        merged += report.merged
        for evicted in report.evicted_ids:
            entry_labels.pop(evicted, None)
        for feat_idx, (what, entry_id) in enumerate(report.assignments):
            if what == "appended":
                entry_labels[entry_id] = int(labels[feat_idx])
        all_keys.append(keys)
        all_labels.append(labels)

    q = held_out_queries(spec, queries)
    store_keys = np.concatenate(all_keys)
    store_labels = np.concatenate(all_labels)
    afb_labels = np.array([entry_labels[int(i)] for i in bank.ids], dtype=np.int64)

    afb_pick = np.argmax(q.astype(np.float64) @ bank.keys.astype(np.float64).T, axis=1)
    all_pick = np.argmax(q.astype(np.float64) @ store_keys.astype(np.float64).T, axis=1)
    agreement = float((afb_labels[afb_pick] == store_labels[all_pick]).mean())

    return {
        "stream": spec.kind,
        "frames": spec.frames,
        "features_per_frame": spec.features_per_frame,
        "dim": spec.dim,
        "budget": bank_config.budget,
        "total_features": total,
        "merge_fraction": merged / max(total - keys0.shape[0], 1),
        "final_size": bank.size,
        "evictions": bank.stats.evictions,
        "absorb_throughput_fps": (total - keys0.shape[0]) / elapsed if elapsed > 0 else float("inf"),
        "oracle_agreement": agreement,
        "backend": backend.name(),
    }


def compare_backends(spec: StreamSpec, bank_config: BankConfig, queries: int = 256) -> list:
    """Run the same benchmark on every available kernel backend."""
    rows = []
    for name in backend.available():
        prior = backend.use(name)
        try:
            rows.append(run_bank_bench(spec, bank_config, queries))
        finally:
            backend.use(prior)
    return rows
