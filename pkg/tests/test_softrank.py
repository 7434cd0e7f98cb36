"""Soft ranking against independent brute-force oracles plus structural
properties of the permutahedron projection."""
import numpy as np
import pytest

from patchcomm import softrank
from patchcomm import tensor as T
from patchcomm.tensor import Tensor
from patchcomm.verify import isotonic_oracle, soft_rank_oracle


class TestIsotonic:
    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
    def test_matches_partition_enumeration_oracle(self, rng, n):
        for _ in range(60):
            v = rng.normal(size=n) * rng.uniform(0.5, 4.0)
            got = softrank.isotonic_regression(v).projected
            np.testing.assert_allclose(got, isotonic_oracle(v), atol=1e-9)

    def test_already_monotone_is_fixed_point(self):
        v = np.array([5.0, 3.0, 3.0, -1.0])
        np.testing.assert_array_equal(softrank.isotonic_regression(v).projected, v)

    def test_increasing_input_collapses_to_mean(self):
        v = np.array([1.0, 2.0, 3.0])
        sol = softrank.isotonic_regression(v)
        np.testing.assert_allclose(sol.projected, 2.0)
        assert sol.blocks == [(0, 3)]

    def test_blocks_partition_the_index_range(self, rng):
        v = rng.normal(size=12)
        blocks = softrank.isotonic_regression(v).blocks
        assert blocks[0][0] == 0 and blocks[-1][1] == 12
        assert all(a[1] == b[0] for a, b in zip(blocks, blocks[1:]))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            softrank.isotonic_regression(np.array([1.0, np.nan]))


class TestSoftRank:
    def test_matches_permutahedron_oracle(self, rng):
        # the acceptance run covers >= 100 instances; keep a smaller slice here
        for _ in range(25):
            k = int(rng.integers(2, 6))
            s = rng.normal(size=k) * 2
            eps = float(rng.uniform(0.1, 3.0))
            got = softrank.soft_rank(s, eps).values
            np.testing.assert_allclose(got, soft_rank_oracle(s, eps), atol=1e-6)

    def test_lives_inside_permutahedron(self, rng):
        for _ in range(50):
            k = int(rng.integers(2, 12))
            r = softrank.soft_rank(rng.normal(size=k) * 3, 0.7).values
            assert np.all(r >= 1 - 1e-9) and np.all(r <= k + 1e-9)
            assert r.sum() == pytest.approx(k * (k + 1) / 2)

    def test_small_epsilon_recovers_hard_ranks(self, rng):
        s = rng.normal(size=8)
        r = softrank.soft_rank(s, 1e-6).values
        np.testing.assert_allclose(r, softrank.hard_rank(s), atol=1e-3)

    def test_large_epsilon_approaches_constant(self, rng):
        r = softrank.soft_rank(rng.normal(size=6), 1e6).values
        np.testing.assert_allclose(r, 3.5, atol=1e-3)

    def test_permutation_equivariance(self, rng):
        s = rng.normal(size=7)
        perm = rng.permutation(7)
        a = softrank.soft_rank(s, 0.5).values[perm]
        b = softrank.soft_rank(s[perm], 0.5).values
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_monotone_in_scores(self, rng):
        # a larger score never gets a smaller soft rank
        s = rng.normal(size=9)
        r = softrank.soft_rank(s, 0.8).values
        order = np.argsort(s)
        assert np.all(np.diff(r[order]) >= -1e-12)

    def test_rejects_bad_epsilon(self):
        with pytest.raises(ValueError):
            softrank.soft_rank(np.zeros(3), 0.0)


class TestVJP:
    def test_vjp_matches_finite_differences(self, rng):
        for _ in range(20):
            k = int(rng.integers(2, 8))
            s = rng.normal(size=k) * 2
            eps = float(rng.uniform(0.3, 2.0))
            u = rng.normal(size=k)
            got = softrank.soft_rank_vjp(s, eps, u)
            num = np.empty(k)
            h = 1e-6
            for i in range(k):
                d = np.zeros(k)
                d[i] = h
                hi = softrank.soft_rank(s + d, eps).values
                lo = softrank.soft_rank(s - d, eps).values
                num[i] = u @ (hi - lo) / (2 * h)
            np.testing.assert_allclose(got, num, atol=1e-4)

    def test_vjp_rows_orthogonal_to_constant(self, rng):
        # ranks are invariant to a constant shift of the scores
        s, u = rng.normal(size=6), rng.normal(size=6)
        assert softrank.soft_rank_vjp(s, 0.9, u).sum() == pytest.approx(0.0, abs=1e-10)

    def test_autograd_op_agrees_with_vjp(self, rng):
        s = rng.normal(size=(3, 5))
        w = rng.normal(size=(3, 5))
        x = Tensor(s, requires_grad=True)
        T.tsum(softrank.soft_rank_rows(x, 0.7) * Tensor(w)).backward()
        for b in range(3):
            np.testing.assert_allclose(
                x.grad[b], softrank.soft_rank_vjp(s[b], 0.7, w[b]), atol=1e-12)


class TestHardRank:
    def test_largest_score_gets_rank_k(self):
        r = softrank.hard_rank(np.array([0.1, 5.0, -2.0]))
        np.testing.assert_array_equal(r, [2, 3, 1])

    def test_is_a_permutation_of_1_to_k(self, rng):
        r = softrank.hard_rank(rng.normal(size=10))
        assert sorted(r) == list(range(1, 11))

    def test_ties_break_to_lower_index(self):
        r = softrank.hard_rank(np.array([1.0, 1.0, 0.0]))
        np.testing.assert_array_equal(r, [3, 2, 1])
