import math

import numpy as np
import pytest

from afb.errors import DataError
from afb.feature_bank import (
    BankConfig,
    FeatureBank,
    FeatureEntry,
    dump_snapshot,
    lfu_index,
    load_snapshot,
)


def cfg(**kw):
    base = dict(key_dim=2, value_dim=2, budget=10)
    base.update(kw)
    return BankConfig(**base)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return (v / np.linalg.norm(v)).astype(np.float32)


def make_bank(keys, values=None, config=None, frame=1):
    keys = np.asarray(keys, dtype=np.float32)
    values = keys.copy() if values is None else np.asarray(values, dtype=np.float32)
    config = config or cfg(key_dim=keys.shape[1], value_dim=values.shape[1])
    return FeatureBank(config, (keys, values), frame)


class TestInit:
    def test_direct_construction(self):
        bank = make_bank(np.eye(3, 2, dtype=np.float32))
        assert bank.size == 3
        assert np.all(bank.cnts == 0.0)
        assert np.all(bank.births == 1)
        assert bank.stats.merges == bank.stats.appends == bank.stats.evictions == 0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            FeatureBank(cfg(), [], frame=1)

    def test_over_budget_rejected(self):
        keys = np.ones((11, 2), dtype=np.float32)
        with pytest.raises(ValueError, match="first frame exceeds budget"):
            FeatureBank(cfg(), (keys, keys.copy()), frame=1)

    def test_dim_mismatch_rejected(self):
        keys = np.ones((2, 3), dtype=np.float32)
        with pytest.raises(ValueError, match="dim mismatch"):
            FeatureBank(cfg(), (keys, keys.copy()), frame=1)

    def test_accepts_pair_list(self):
        bank = FeatureBank(cfg(), [([1, 0], [2, 2]), ([0, 1], [3, 3])], frame=1)
        assert bank.size == 2
        np.testing.assert_allclose(bank.values[1], [3, 3])


class TestAbsorb:
    def test_exact_duplicate_is_fixed_point(self):
        bank = make_bank([[1.0, 0.0]], [[2.0, 2.0]])
        report = bank.absorb([([1.0, 0.0], [2.0, 2.0])], frame=2)
        assert (report.merged, report.appended) == (1, 0)
        assert bank.size == 1
        np.testing.assert_allclose(bank.keys[0], [1.0, 0.0], atol=1e-6)
        np.testing.assert_allclose(bank.values[0], [2.0, 2.0], atol=1e-6)

    def test_orthogonal_appends(self):
        bank = make_bank([[1.0, 0.0]])
        report = bank.absorb([([0.0, 1.0], [0.0, 1.0])], frame=2)
        assert (report.merged, report.appended) == (0, 1)
        assert bank.size == 2
        assert bank.births[1] == 2 and bank.cnts[1] == 0.0

    def test_merge_hand_evaluated(self):
        # EMA with lambda 0.9 toward a nearby unit key.
        bank = make_bank([[1.0, 0.0]], [[2.0, 2.0]])
        new_key = unit([0.9, 0.1])
        report = bank.absorb([(new_key, [0.0, 0.0])], frame=2)
        assert report.merged == 1
        np.testing.assert_allclose(bank.keys[0], [0.99939, 0.01104], atol=1e-4)
        np.testing.assert_allclose(bank.values[0], [1.8, 1.8], atol=1e-4)

    def test_assignments_reported(self):
        bank = make_bank([[1.0, 0.0]])
        report = bank.absorb([([1.0, 0.0], [1.0, 0.0]), ([0.0, 1.0], [0.0, 1.0])], frame=2)
        kinds = [a[0] for a in report.assignments]
        assert kinds == ["merged", "appended"]

    def test_snapshot_assignment_order_independent(self):
        # Both new features match the same snapshot entry even though the
        # first merge moves it.
        bank = make_bank([[1.0, 0.0], [0.0, 1.0]])
        a = unit([0.99, 0.14])
        b = unit([0.99, -0.14])
        report = bank.absorb([(a, a), (b, b)], frame=2)
        targets = {entry for _, entry in report.assignments}
        assert targets == {0}
        assert report.merged == 2

    def test_frame_must_advance(self):
        bank = make_bank([[1.0, 0.0]])
        with pytest.raises(ValueError):
            bank.absorb([([0.0, 1.0], [0.0, 1.0])], frame=1)

    def test_merge_direction_convex(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            old_key = unit(rng.normal(size=4))
            cfgd = cfg(key_dim=4, value_dim=4, epsilon_h=0.5)
            bank = make_bank([old_key], config=cfgd)
            new_key = unit(old_key + 0.2 * rng.normal(size=4))
            bank.absorb([(new_key, new_key)], frame=2)
            lo = np.minimum(old_key, new_key) - 1e-6
            hi = np.maximum(old_key, new_key) + 1e-6
            assert np.all(bank.keys[0] >= lo) and np.all(bank.keys[0] <= hi)

    def test_append_exactness_store_all(self):
        # Merging disabled and budget ample: the bank is the stream, bit for bit.
        rng = np.random.default_rng(11)
        config = cfg(key_dim=3, value_dim=3, epsilon_h=1.5, budget=100)
        keys = rng.normal(size=(40, 3)).astype(np.float32)
        values = rng.normal(size=(40, 3)).astype(np.float32)
        bank = FeatureBank(config, (keys[:5], values[:5]), frame=1)
        for t, lo in enumerate(range(5, 40, 7), start=2):
            bank.absorb((keys[lo : lo + 7], values[lo : lo + 7]), frame=t)
        assert bank.size == 40
        np.testing.assert_array_equal(bank.keys, keys)
        np.testing.assert_array_equal(bank.values, values)

    def test_empty_batch_is_noop(self):
        bank = make_bank([[1.0, 0.0]])
        report = bank.absorb([], frame=2)
        assert (report.merged, report.appended) == (0, 0)
        assert bank.current_frame == 2


class TestUsageAndLfu:
    def test_zero_count_unchanged(self):
        bank = make_bank([[1.0, 0.0]])
        bank.record_usage([0])
        assert bank.cnts[0] == 0.0

    def test_ln_100(self):
        bank = make_bank([[1.0, 0.0]])
        bank.record_usage([99])
        assert bank.cnts[0] == pytest.approx(4.60517, abs=1e-4)

    def test_additivity(self):
        bank = make_bank([[1.0, 0.0]])
        bank.record_usage([9])
        bank.record_usage([99])
        assert bank.cnts[0] == pytest.approx(math.log(10) + math.log(100), abs=1e-4)

    def test_length_mismatch_rejected(self):
        bank = make_bank([[1.0, 0.0]])
        with pytest.raises(ValueError):
            bank.record_usage([1, 2])

    def test_lfu_index_values(self):
        entry = FeatureEntry(id=0, birth=10, cnt=4.6, key=None, value=None)
        assert lfu_index(entry, 19) == pytest.approx(0.46, abs=1e-6)
        assert lfu_index(FeatureEntry(0, 0, 0.0, None, None), 100) == 0.0

    def test_lfu_monotone_in_age(self):
        young = FeatureEntry(id=0, birth=10, cnt=3.0, key=None, value=None)
        old = FeatureEntry(id=1, birth=2, cnt=3.0, key=None, value=None)
        assert lfu_index(old, 20) < lfu_index(young, 20)


class TestEvict:
    def test_drops_smallest_lfu(self):
        keys = np.eye(10, 2, k=0, dtype=np.float32)
        keys = np.tile(np.eye(2, dtype=np.float32), (5, 1))
        bank = make_bank(keys)
        counts = [0, 3, 10, 10, 10, 10, 10, 10, 10, 1]
        bank.record_usage(counts)
        evicted = bank.evict(2)
        assert evicted == [0, 9]
        assert bank.size == 8

    def test_noop_when_fitting(self):
        bank = make_bank([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        assert bank.evict(2) == []
        assert bank.size == 3

    def test_tie_break_oldest_first(self):
        config = cfg(budget=3)
        bank = FeatureBank(config, [([1, 0], [1, 0])], frame=1)
        bank.absorb([([0, 1], [0, 1])], frame=2)
        bank.absorb([([1, 1], [1, 1])], frame=3)
        # All cnt 0 => all LFU 0; oldest birth goes first.
        evicted = bank.evict(2)
        assert evicted == [0, 1]

    def test_needed_slots_over_budget_rejected(self):
        bank = make_bank([[1.0, 0.0]])
        with pytest.raises(ValueError):
            bank.evict(11)

    def test_absorb_triggers_eviction_before_append(self):
        config = cfg(budget=3, epsilon_h=1.5)
        bank = FeatureBank(config, [([1, 0], [1, 0]), ([0, 1], [0, 1]), ([1, 1], [1, 1])], frame=1)
        bank.record_usage([5, 5, 0])
        report = bank.absorb([([2, 1], [2, 1]), ([1, 2], [1, 2])], frame=2)
        assert report.appended == 2
        assert bank.size == 3
        assert 2 in report.evicted_ids  # the never-used entry went first


class TestInvariants:
    def test_budget_fuzz(self):
        rng = np.random.default_rng(42)
        for trial in range(30):
            budget = int(rng.integers(2, 12))
            config = BankConfig(
                key_dim=3,
                value_dim=2,
                budget=budget,
                epsilon_h=float(rng.uniform(0.3, 1.2)),
            )
            n0 = int(rng.integers(1, budget + 1))
            bank = FeatureBank(
                config,
                (rng.normal(size=(n0, 3)).astype(np.float32), rng.normal(size=(n0, 2)).astype(np.float32)),
                frame=1,
            )
            for t in range(2, 40):
                op = rng.integers(0, 3)
                if op == 0:
                    m = int(rng.integers(0, 2 * budget))
                    m = min(m, budget)
                    bank.absorb(
                        (rng.normal(size=(m, 3)).astype(np.float32), rng.normal(size=(m, 2)).astype(np.float32)),
                        frame=t,
                    )
                elif op == 1:
                    bank.record_usage(rng.integers(0, 50, size=bank.size))
                else:
                    bank.evict(int(rng.integers(1, budget + 1)))
                assert bank.size <= budget

    def test_never_used_evicted_before_used(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(3, 8))
            keys = rng.normal(size=(n, 3)).astype(np.float32)
            config = BankConfig(key_dim=3, value_dim=3, budget=n)
            bank = FeatureBank(config, (keys, keys.copy()), frame=1)
            bank.record_usage(rng.integers(0, 5, size=n))
            cnts = bank.cnts
            ids = bank.ids
            evicted = set(bank.evict(int(rng.integers(1, n))))
            used_evicted = any(c > 0 for i, c in zip(ids, cnts) if i in evicted)
            zero_survived = any(c == 0 for i, c in zip(ids, cnts) if i not in evicted)
            assert not (used_evicted and zero_survived)

    def test_determinism(self):
        def build():
            rng = np.random.default_rng(8)
            config = BankConfig(key_dim=4, value_dim=4, budget=16)
            bank = FeatureBank(
                config,
                (rng.normal(size=(8, 4)).astype(np.float32), rng.normal(size=(8, 4)).astype(np.float32)),
                frame=1,
            )
            for t in range(2, 20):
                batch = rng.normal(size=(6, 4)).astype(np.float32)
                bank.absorb((batch, batch), frame=t)
                bank.record_usage(rng.integers(0, 9, size=bank.size))
            return bank

        a, b = build(), build()
        np.testing.assert_array_equal(a.keys, b.keys)
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.ids, b.ids)
        np.testing.assert_array_equal(a.cnts, b.cnts)


class TestSnapshot:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        config = BankConfig(key_dim=5, value_dim=3, budget=32)
        bank = FeatureBank(
            config,
            (rng.normal(size=(7, 5)).astype(np.float32), rng.normal(size=(7, 3)).astype(np.float32)),
            frame=1,
        )
        bank.absorb((rng.normal(size=(4, 5)).astype(np.float32), rng.normal(size=(4, 3)).astype(np.float32)), frame=3)
        bank.record_usage(rng.integers(0, 20, size=bank.size))

        path = tmp_path / "bank.afbk"
        dump_snapshot(bank, path)
        loaded = load_snapshot(path, config)
        np.testing.assert_array_equal(loaded.keys, bank.keys)
        np.testing.assert_array_equal(loaded.values, bank.values)
        np.testing.assert_array_equal(loaded.ids, bank.ids)
        np.testing.assert_allclose(loaded.cnts, bank.cnts)
        np.testing.assert_array_equal(loaded.births, bank.births)
        assert loaded.current_frame == 3

    def test_truncated_rejected(self, tmp_path):
        bank = make_bank([[1.0, 0.0]])
        path = tmp_path / "bank.afbk"
        dump_snapshot(bank, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-3])
        with pytest.raises(DataError, match="expected"):
            load_snapshot(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bank.afbk"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(DataError, match="magic"):
            load_snapshot(path)

    def test_format_layout_bytes(self, tmp_path):
        # Spot-check the documented little-endian layout.
        bank = make_bank([[1.0, 2.0]], [[3.0, 4.0]])
        path = tmp_path / "bank.afbk"
        dump_snapshot(bank, path)
        raw = path.read_bytes()
        assert raw[:4] == b"AFBK"
        assert int.from_bytes(raw[4:8], "little") == 1  # version
        assert int.from_bytes(raw[8:12], "little") == 2  # key dim
        assert int.from_bytes(raw[12:16], "little") == 2  # value dim
        assert int.from_bytes(raw[16:20], "little") == 1  # count
        assert len(raw) == 20 + (8 + 8 + 8) + 4 * 4
