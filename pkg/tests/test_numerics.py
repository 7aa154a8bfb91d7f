import numpy as np
import pytest

from afb.numerics import Rng, bilinear_upsample, cosine, softmax


class TestSoftmax:
    def test_symmetry_two_zeros(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-7)

    def test_single_element_is_one(self):
        for x in (-50.0, 0.0, 3.25, 1e4):
            np.testing.assert_allclose(softmax([x]), [1.0], atol=1e-7)

    def test_direct_evaluation(self):
        # exp([1,2,3]) / sum
        np.testing.assert_allclose(
            softmax([1.0, 2.0, 3.0]), [0.09003057, 0.24472847, 0.66524096], atol=1e-5
        )

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty softmax"):
            softmax([])

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            softmax([1.0, np.inf])

    def test_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            v = rng.normal(size=rng.integers(1, 40))
            w = softmax(v)
            assert abs(w.sum() - 1.0) < 1e-6
            assert np.all(w > 0) and np.all(w < 1.0 + 1e-7)
            shifted = softmax(v + rng.normal())
            np.testing.assert_allclose(w, shifted, atol=1e-6)


class TestCosine:
    def test_identity(self):
        v = np.array([0.3, -1.2, 4.0])
        assert cosine(v, v) == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal(self):
        assert cosine([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0, abs=1e-6)

    def test_derived_value(self):
        assert cosine([1.0, 0.0], [1.0, 1.0]) == pytest.approx(0.70711, abs=1e-5)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="zero-norm vector"):
            cosine([0.0, 0.0], [1.0, 0.0])

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            cosine([1.0, 0.0], [1.0, 0.0, 0.0])

    def test_symmetric_and_scale_invariant(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            a = rng.normal(size=5)
            b = rng.normal(size=5)
            lam, mu = rng.uniform(0.1, 10, size=2)
            c = cosine(a, b)
            assert -1.0 - 1e-6 <= c <= 1.0 + 1e-6
            assert c == pytest.approx(cosine(b, a), abs=1e-6)
            assert c == pytest.approx(cosine(lam * a, mu * b), abs=1e-6)


class TestBilinearUpsample:
    def test_constant_preserved(self):
        src = np.full((3, 4), 2.5)
        out = bilinear_upsample(src, 9, 17)
        np.testing.assert_allclose(out, 2.5, atol=1e-12)

    def test_midpoint(self):
        out = bilinear_upsample(np.array([[0.0, 1.0]]), 1, 3)
        np.testing.assert_allclose(out, [[0.0, 0.5, 1.0]], atol=1e-12)

    def test_center_of_2x2(self):
        out = bilinear_upsample(np.array([[0.0, 1.0], [2.0, 3.0]]), 3, 3)
        assert out[1, 1] == pytest.approx(1.5, abs=1e-12)

    def test_vector_grid(self):
        src = np.zeros((2, 2, 3), dtype=np.float32)
        src[1, 1] = 1.0
        out = bilinear_upsample(src, 3, 3)
        assert out.shape == (3, 3, 3)
        assert out.dtype == np.float32
        np.testing.assert_allclose(out[1, 1], 0.25, atol=1e-6)

    def test_zero_output_rejected(self):
        with pytest.raises(ValueError):
            bilinear_upsample(np.zeros((2, 2)), 0, 3)

    def test_downscale_rejected(self):
        with pytest.raises(ValueError):
            bilinear_upsample(np.zeros((4, 4)), 3, 8)


class TestRng:
    def test_equal_seeds_equal_streams(self):
        a = Rng(123).uniform(size=100_000)
        b = Rng(123).uniform(size=100_000)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).uniform(size=100), Rng(2).uniform(size=100))

    def test_split_independent_of_draw_order(self):
        r1 = Rng(9)
        r1.normal(size=10)  # consume some parent state
        child_after = r1.split(4).uniform(size=50)
        child_fresh = Rng(9).split(4).uniform(size=50)
        np.testing.assert_array_equal(child_after, child_fresh)

    def test_split_keys_distinct(self):
        r = Rng(5)
        assert not np.array_equal(r.split(0).uniform(size=20), r.split(1).uniform(size=20))
