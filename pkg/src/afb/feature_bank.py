"""Bounded per-object feature store with merge-or-append updates and
least-frequently-used eviction.

A bank holds (key, value) pairs.  New features whose best cosine similarity
against the stored keys exceeds ``epsilon_h`` are folded into the matching
entry by an exponential moving average; the rest are appended.  When an
update would push the bank past its budget, entries with the smallest
usage-per-frame index are dropped first.

Assignment is computed against a snapshot of the keys taken at call entry
(so it is order-independent and parallelizable), while the EMA updates are
applied sequentially in input order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import DataError

SNAPSHOT_MAGIC = b"AFBK"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class BankConfig:
    """Merge/evict policy parameters.

    ``epsilon_h`` is the merge threshold on cosine similarity; any value
    above 1 disables merging outright (cosine never exceeds 1), which is the
    documented switch for store-all behaviour.  ``lambda_p`` weights the
    moving average toward the stored entry.  ``epsilon_l`` is the attention
    weight above which a retrieval counts as a use.
    """

    key_dim: int
    value_dim: int
    epsilon_h: float = 0.95
    lambda_p: float = 0.9
    epsilon_l: float = 1e-4
    budget: int = 1024
    normalize_keys: bool = False

    def __post_init__(self):
        if self.key_dim < 1 or self.value_dim < 1:
            raise ValueError("feature dims must be positive")
        if not (self.epsilon_h > 0.0 and np.isfinite(self.epsilon_h)):
            raise ValueError("epsilon_h must be positive")
        if not (0.0 <= self.lambda_p < 1.0):
            raise ValueError("lambda_p must be in [0, 1)")
        if not (0.0 < self.epsilon_l < 1.0):
            raise ValueError("epsilon_l must be in (0, 1)")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")


@dataclass(frozen=True)
class FeatureEntry:
    """Read-only view of one bank slot."""

    id: int
    birth: int
    cnt: float
    key: np.ndarray
    value: np.ndarray


@dataclass
class BankStats:
    merges: int = 0
    appends: int = 0
    evictions: int = 0

    def snapshot(self) -> "BankStats":
        return BankStats(self.merges, self.appends, self.evictions)


@dataclass(frozen=True)
class AbsorbReport:
    """Outcome of one absorb call.

    ``assignments`` records, per input feature in order, ("merged", entry_id)
    or ("appended", entry_id); ``evicted_ids`` lists entries dropped to make
    room for the appends.
    """

    merged: int
    appended: int
    assignments: tuple = ()
    evicted_ids: tuple = ()


def _as_feature_arrays(features, key_dim: int, value_dim: int):
    """Normalize a feature batch to contiguous (N, Dk) / (N, Dv) float32."""
    if (
        isinstance(features, tuple)
        and len(features) == 2
        and isinstance(features[0], np.ndarray)
        and features[0].ndim == 2
    ):
        keys = np.asarray(features[0], dtype=np.float32)
        values = np.asarray(features[1], dtype=np.float32)
    else:
        pairs = list(features)
        if not pairs:
            return (np.empty((0, key_dim), np.float32), np.empty((0, value_dim), np.float32))
        keys = np.asarray([np.asarray(k, dtype=np.float32) for k, _ in pairs])
        values = np.asarray([np.asarray(v, dtype=np.float32) for _, v in pairs])
    if keys.ndim != 2 or values.ndim != 2 or keys.shape[0] != values.shape[0]:
        raise ValueError("features must be parallel lists of (key, value)")
    if keys.shape[1] != key_dim or values.shape[1] != value_dim:
        raise ValueError(
            f"feature dim mismatch: got key {keys.shape[1]}/value {values.shape[1]}, "
            f"bank expects {key_dim}/{value_dim}"
        )
    return np.ascontiguousarray(keys), np.ascontiguousarray(values)


class FeatureBank:
    """Bounded store of (key, value) entries for one object."""

    def __init__(self, config: BankConfig, first_features, frame: int):
        keys, values = _as_feature_arrays(first_features, config.key_dim, config.value_dim)
        if keys.shape[0] == 0:
            raise ValueError("feature bank requires at least one first-frame feature")
        if keys.shape[0] > config.budget:
            raise ValueError("first frame exceeds budget")
        self.config = config
        self._keys = self._maybe_normalize(keys)
        self._values = values
        n = keys.shape[0]
        self._cnt = np.zeros(n, dtype=np.float64)
        self._birth = np.full(n, int(frame), dtype=np.int64)
        self._ids = np.arange(n, dtype=np.int64)
        self._next_id = n
        self.current_frame = int(frame)
        self.stats = BankStats()

    # -- views ------------------------------------------------------------

    @property
    def size(self) -> int:
        return self._keys.shape[0]

    def __len__(self) -> int:
        return self.size

    @property
    def keys(self) -> np.ndarray:
        v = self._keys.view()
        v.flags.writeable = False
        return v

    @property
    def values(self) -> np.ndarray:
        v = self._values.view()
        v.flags.writeable = False
        return v

    @property
    def ids(self) -> np.ndarray:
        return self._ids.copy()

    @property
    def cnts(self) -> np.ndarray:
        return self._cnt.copy()

    @property
    def births(self) -> np.ndarray:
        return self._birth.copy()

    def entries(self):
        return [
            FeatureEntry(
                id=int(self._ids[j]),
                birth=int(self._birth[j]),
                cnt=float(self._cnt[j]),
                key=self._keys[j].copy(),
                value=self._values[j].copy(),
            )
            for j in range(self.size)
        ]

    # -- updates ----------------------------------------------------------

    def absorb(self, new_features, frame: int) -> AbsorbReport:
        """Merge-or-append a feature batch observed at ``frame``.

        Each new feature is compared (cosine) against the keys as they were
        at call entry; above-threshold features are EMA-merged into their
        best entry sequentially in input order, the rest are appended with a
        fresh id, zero use count and ``birth = frame``.  Eviction runs before
        the appends land so the budget holds on exit.
        """
        keys, values = _as_feature_arrays(new_features, self.config.key_dim, self.config.value_dim)
        if frame <= self.current_frame:
            raise ValueError("absorb frame must advance past the bank's current frame")
        m = keys.shape[0]
        if m == 0:
            self.current_frame = int(frame)
            return AbsorbReport(0, 0)

        best_idx, best_cos = backend.cosine_best_match(keys, self._keys)
        merge = best_cos > self.config.epsilon_h

        lam = self.config.lambda_p
        assignments = [None] * m
        staged = []
        for i in range(m):
            if merge[i]:
                j = int(best_idx[i])
                merged_k = lam * self._keys[j].astype(np.float64) + (1.0 - lam) * keys[i].astype(np.float64)
                merged_v = lam * self._values[j].astype(np.float64) + (1.0 - lam) * values[i].astype(np.float64)
                if self.config.normalize_keys:
                    norm = np.linalg.norm(merged_k)
                    if norm > 0.0:
                        merged_k = merged_k / norm
                self._keys[j] = merged_k.astype(np.float32)
                self._values[j] = merged_v.astype(np.float32)
                assignments[i] = ("merged", int(self._ids[j]))
            else:
                staged.append(i)

        evicted = []
        if staged:
            if self.size + len(staged) > self.config.budget:
                evicted = self.evict(len(staged))
            new_ids = np.arange(self._next_id, self._next_id + len(staged), dtype=np.int64)
            self._next_id += len(staged)
            idx = np.asarray(staged, dtype=np.int64)
            self._keys = np.concatenate([self._keys, self._maybe_normalize(keys[idx])])
            self._values = np.concatenate([self._values, values[idx]])
            self._cnt = np.concatenate([self._cnt, np.zeros(len(staged))])
            self._birth = np.concatenate([self._birth, np.full(len(staged), int(frame), dtype=np.int64)])
            self._ids = np.concatenate([self._ids, new_ids])
            for pos, i in enumerate(staged):
                assignments[i] = ("appended", int(new_ids[pos]))

        n_merged = int(merge.sum())
        self.stats.merges += n_merged
        self.stats.appends += len(staged)
        self.current_frame = int(frame)
        return AbsorbReport(
            merged=n_merged,
            appended=len(staged),
            assignments=tuple(assignments),
            evicted_ids=tuple(evicted),
        )

    def record_usage(self, match_counts) -> None:
        """Accumulate use counts: cnt(j) += ln(count_j + 1)."""
        counts = np.asarray(match_counts, dtype=np.int64)
        if counts.ndim != 1 or counts.shape[0] != self.size:
            raise ValueError("match_counts length must equal bank size")
        if np.any(counts < 0):
            raise ValueError("match counts must be nonnegative")
        self._cnt += np.log(counts.astype(np.float64) + 1.0)

    def lfu_indices(self, current_frame: int | None = None) -> np.ndarray:
        """Per-entry usage-per-frame index cnt / (current_frame - birth + 1)."""
        now = self.current_frame if current_frame is None else int(current_frame)
        if np.any(self._birth > now):
            raise ValueError("current_frame precedes an entry birth")
        span = (now - self._birth + 1).astype(np.float64)
        return self._cnt / span

    def evict(self, needed_slots: int) -> list:
        """Drop lowest-LFU entries until ``size + needed_slots <= budget``.

        Ties break toward older birth, then smaller id.  Returns the evicted
        entry ids (empty when the request already fits).
        """
        needed = int(needed_slots)
        if needed < 1:
            raise ValueError("needed_slots must be positive")
        if needed > self.config.budget:
            raise ValueError("needed_slots exceeds budget")
        overflow = self.size + needed - self.config.budget
        if overflow <= 0:
            return []
        order = np.lexsort((self._ids, self._birth, self.lfu_indices()))
        drop = order[:overflow]
        evicted = [int(i) for i in self._ids[drop]]
        keep = np.ones(self.size, dtype=bool)
        keep[drop] = False
        self._keys = np.ascontiguousarray(self._keys[keep])
        self._values = np.ascontiguousarray(self._values[keep])
        self._cnt = self._cnt[keep]
        self._birth = self._birth[keep]
        self._ids = self._ids[keep]
        self.stats.evictions += overflow
        return evicted

    def _maybe_normalize(self, keys: np.ndarray) -> np.ndarray:
        if not self.config.normalize_keys:
            return keys
        norms = np.linalg.norm(keys.astype(np.float64), axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        return (keys / norms).astype(np.float32)


def lfu_index(entry: FeatureEntry, current_frame: int) -> float:
    """LFU index of a single entry: cnt / l, with l = current - birth + 1."""
    if current_frame < entry.birth:
        raise ValueError("current_frame precedes entry birth")
    return entry.cnt / float(current_frame - entry.birth + 1)


# -- snapshot I/O ----------------------------------------------------------
#
# Layout (little-endian): magic "AFBK", u32 version, u32 key_dim,
# u32 value_dim, u32 entry_count, then per entry: u64 id, u64 birth, f64 cnt,
# f32 key[key_dim], f32 value[value_dim].

_HEADER = struct.Struct("<4sIIII")
_ENTRY_FIXED = struct.Struct("<QQd")


def dump_snapshot(bank: FeatureBank, path) -> None:
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                SNAPSHOT_MAGIC,
                SNAPSHOT_VERSION,
                bank.config.key_dim,
                bank.config.value_dim,
                bank.size,
            )
        )
        for j in range(bank.size):
            fh.write(_ENTRY_FIXED.pack(int(bank._ids[j]), int(bank._birth[j]), float(bank._cnt[j])))
            fh.write(bank._keys[j].astype("<f4").tobytes())
            fh.write(bank._values[j].astype("<f4").tobytes())


def load_snapshot(path, config: BankConfig | None = None) -> FeatureBank:
    """Rebuild a bank from a snapshot file.

    The format carries no policy parameters, so pass ``config`` to restore
    them; otherwise defaults with the stored dims apply.  ``current_frame``
    resumes at the newest stored birth.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated snapshot header ({len(raw)} bytes)")
    magic, version, key_dim, value_dim, count = _HEADER.unpack_from(raw, 0)
    if magic != SNAPSHOT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise DataError(f"{path}: unsupported snapshot version {version}")
    if config is None:
        config = BankConfig(key_dim=key_dim, value_dim=value_dim)
    elif (config.key_dim, config.value_dim) != (key_dim, value_dim):
        raise DataError(f"{path}: snapshot dims {key_dim}/{value_dim} do not match config")

    entry_bytes = _ENTRY_FIXED.size + 4 * (key_dim + value_dim)
    expected = _HEADER.size + count * entry_bytes
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)} (offset {_HEADER.size})")
    if count == 0:
        raise DataError(f"{path}: snapshot holds no entries")

    ids = np.empty(count, dtype=np.int64)
    births = np.empty(count, dtype=np.int64)
    cnts = np.empty(count, dtype=np.float64)
    keys = np.empty((count, key_dim), dtype=np.float32)
    values = np.empty((count, value_dim), dtype=np.float32)
    off = _HEADER.size
    for j in range(count):
        ids[j], births[j], cnts[j] = _ENTRY_FIXED.unpack_from(raw, off)
        off += _ENTRY_FIXED.size
        keys[j] = np.frombuffer(raw, dtype="<f4", count=key_dim, offset=off)
        off += 4 * key_dim
        values[j] = np.frombuffer(raw, dtype="<f4", count=value_dim, offset=off)
        off += 4 * value_dim

    bank = FeatureBank.__new__(FeatureBank)
    bank.config = config
    bank._keys = np.ascontiguousarray(keys)
    bank._values = np.ascontiguousarray(values)
    bank._cnt = cnts
    bank._birth = births
    bank._ids = ids
    bank._next_id = int(ids.max()) + 1
    bank.current_frame = int(births.max())
    bank.stats = BankStats()
    return bank
