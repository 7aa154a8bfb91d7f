import math

import numpy as np
import pytest

from afb.feature_bank import BankConfig, FeatureBank
from afb.matcher import QueryFeatures, match


def brute_force_retrieve(query_keys, bank_keys, bank_values, eps_l):
    """Independent double-loop evaluation of the softmax retrieval."""
    h, w, _ = query_keys.shape
    n, dv = bank_values.shape
    out = np.zeros((h, w, dv))
    counts = np.zeros(n, dtype=np.int64)
    for y in range(h):
        for x in range(w):
            q = query_keys[y, x].astype(np.float64)
            dots = [float(np.dot(q, bank_keys[j].astype(np.float64))) for j in range(n)]
            mx = max(dots)
            exps = [math.exp(d - mx) for d in dots]
            total = sum(exps)
            acc = np.zeros(dv)
            for j in range(n):
                wgt = exps[j] / total
                if wgt > eps_l:
                    counts[j] += 1
                acc += wgt * bank_values[j].astype(np.float64)
            out[y, x] = acc
    return out, counts


def make_bank(keys, values, budget=None):
    keys = np.asarray(keys, dtype=np.float32)
    values = np.asarray(values, dtype=np.float32)
    config = BankConfig(key_dim=keys.shape[1], value_dim=values.shape[1], budget=budget or max(len(keys), 1))
    return FeatureBank(config, (keys, values), frame=1)


def make_query(keys, values):
    return QueryFeatures(
        keys=np.asarray(keys, dtype=np.float32), values=np.asarray(values, dtype=np.float32)
    )


class TestMatch:
    def test_singleton_bank(self):
        bank = make_bank([[1.0, 0.0]], [[5.0, -1.0, 2.0]])
        rng = np.random.default_rng(0)
        q = make_query(rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 3)))
        result = match(q, bank, 1e-4)
        np.testing.assert_allclose(result.retrieved, np.broadcast_to([5.0, -1.0, 2.0], (3, 4, 3)), atol=1e-6)
        assert result.usage_counts.tolist() == [12]

    def test_softmax_saturation_picks_matching_entry(self):
        # Dot gaps >> 1: retrieval collapses onto the matching entry.
        bank = make_bank(
            [[10.0, 0.0], [0.0, 10.0]],
            [[1.0, 0.0], [0.0, 1.0]],
        )
        q = make_query([[[10.0, 0.0]]], [[[0.0, 0.0]]])
        result = match(q, bank, 1e-4)
        np.testing.assert_allclose(result.retrieved[0, 0], [1.0, 0.0], atol=1e-3)

    def test_all_zero_dots_average(self):
        bank = make_bank([[0.0, 0.0], [0.0, 0.0]], [[2.0, 0.0], [0.0, 2.0]])
        q = make_query(np.ones((2, 2, 2), dtype=np.float32), np.zeros((2, 2, 2), dtype=np.float32))
        result = match(q, bank, 1e-4)
        np.testing.assert_allclose(result.retrieved, 1.0, atol=1e-6)
        assert result.usage_counts.tolist() == [4, 4]

    def test_concat_layout(self):
        bank = make_bank([[1.0, 0.0]], [[7.0, 8.0]])
        q = make_query(np.zeros((1, 1, 2), np.float32), np.array([[[1.0, 2.0]]], np.float32))
        result = match(q, bank, 1e-4)
        np.testing.assert_allclose(result.concat[0, 0], [1.0, 2.0, 7.0, 8.0])

    def test_empty_bank_rejected(self):
        bank = make_bank([[1.0, 0.0]], [[1.0, 0.0]])
        bank.evict(1)  # budget 1, needed 1 -> empties the bank
        q = make_query(np.zeros((1, 1, 2), np.float32), np.zeros((1, 1, 2), np.float32))
        with pytest.raises(ValueError, match="empty feature bank"):
            match(q, bank, 1e-4)

    def test_dim_mismatch_rejected(self):
        bank = make_bank([[1.0, 0.0]], [[1.0, 0.0]])
        q = make_query(np.zeros((1, 1, 3), np.float32), np.zeros((1, 1, 2), np.float32))
        with pytest.raises(ValueError, match="key dim"):
            match(q, bank, 1e-4)

    def test_default_epsilon_from_bank_config(self):
        bank = make_bank([[0.0, 0.0], [0.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]])
        q = make_query(np.zeros((1, 1, 2), np.float32), np.zeros((1, 1, 2), np.float32))
        result = match(q, bank)
        assert result.usage_counts.tolist() == [1, 1]


class TestOracleEquivalence:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(123)
        for _ in range(20):
            h, w = rng.integers(1, 9, size=2)
            n = int(rng.integers(1, 17))
            dk, dv = rng.integers(1, 6, size=2)
            qk = rng.normal(size=(h, w, dk)).astype(np.float32)
            qv = rng.normal(size=(h, w, dv)).astype(np.float32)
            bk = rng.normal(size=(n, dk)).astype(np.float32)
            bv = rng.normal(size=(n, dv)).astype(np.float32)
            eps = float(rng.uniform(1e-5, 0.2))
            bank = make_bank(bk, bv)
            result = match(make_query(qk, qv), bank, eps)
            expected, counts = brute_force_retrieve(qk, bk, bv, eps)
            np.testing.assert_allclose(result.retrieved, expected, atol=1e-5)
            np.testing.assert_array_equal(result.usage_counts, counts)


class TestProperties:
    def _random_case(self, rng):
        h, w = rng.integers(2, 8, size=2)
        n = int(rng.integers(2, 12))
        qk = rng.normal(size=(h, w, 3)).astype(np.float32)
        qv = rng.normal(size=(h, w, 2)).astype(np.float32)
        bk = rng.normal(size=(n, 3)).astype(np.float32)
        bv = rng.normal(size=(n, 2)).astype(np.float32)
        return qk, qv, bk, bv

    def test_convexity(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            qk, qv, bk, bv = self._random_case(rng)
            result = match(make_query(qk, qv), make_bank(bk, bv), 1e-4)
            lo = bv.min(axis=0) - 1e-6
            hi = bv.max(axis=0) + 1e-6
            assert np.all(result.retrieved >= lo) and np.all(result.retrieved <= hi)

    def test_usage_monotone_in_epsilon(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            qk, qv, bk, bv = self._random_case(rng)
            bank = make_bank(bk, bv)
            q = make_query(qk, qv)
            low = match(q, bank, 1e-4).usage_counts
            high = match(q, bank, 1e-2).usage_counts
            assert np.all(high <= low)

    def test_shift_invariance_via_extra_key_component(self):
        # Appending an identical extra component to every key adds a constant
        # to all dot products, which softmax ignores.
        rng = np.random.default_rng(7)
        qk, qv, bk, bv = self._random_case(rng)
        base = match(make_query(qk, qv), make_bank(bk, bv), 1e-4)
        qk2 = np.concatenate([qk, np.full(qk.shape[:2] + (1,), 2.0, np.float32)], axis=2)
        bk2 = np.concatenate([bk, np.full((bk.shape[0], 1), 3.0, np.float32)], axis=1)
        shifted = match(make_query(qk2, qv), make_bank(bk2, bv), 1e-4)
        np.testing.assert_allclose(shifted.retrieved, base.retrieved, atol=1e-6)
        np.testing.assert_array_equal(shifted.usage_counts, base.usage_counts)
