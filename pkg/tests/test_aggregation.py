import itertools
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bdtd import AggregationError, AggregationRule, ConfigurationError, coordinate_median, fedavg, fltrust, krum, scclip, trimmed_mean, trimmed_mean_vec
from bdtd import _kernels as K
from bdtd.aggregation import krum_subset

vals = st.floats(-1e6, 1e6, allow_nan=False)


class TestTrimmedMean:
    def test_symmetric(self):
        assert trimmed_mean([1, 2, 3, 4, 5], 1) == 3.0

    @pytest.mark.parametrize("f", [0, 1, 2])
    def test_constant(self, f):
        assert trimmed_mean([7.5] * 5, f) == 7.5

    def test_outlier(self):
        out = trimmed_mean([1, 2, 3, 1e9], 1)
        assert out == 2.5 and 1 <= out <= 3

    def test_precondition(self):
        with pytest.raises(AggregationError):
            trimmed_mean([1, 2, 3, 4], 2)

    def test_tie_rng_does_not_change_value(self):
        x = [1, 1, 2, 2, 2, 3, 3]
        assert len({trimmed_mean(x, 2, rng=s) for s in range(20)}) == 1

    def test_vec_reduces_to_scalar(self, rng):
        x = rng.standard_normal(9)
        assert trimmed_mean_vec(x[:, None], 2)[0] == trimmed_mean(x, 2)

    def test_vec_identical(self):
        v = np.array([1.0, -2.0, 3.0])
        assert np.array_equal(trimmed_mean_vec(np.tile(v, (5, 1)), 2), v)

    def test_vec_per_coordinate(self, rng):
        for _ in range(100):
            n, d = int(rng.integers(3, 12)), int(rng.integers(1, 5))
            f = int(rng.integers(0, (n - 1) // 2 + 1))
            x = rng.standard_normal((n, d))
            expected = [trimmed_mean(x[:, c], f) for c in range(d)]
            np.testing.assert_allclose(trimmed_mean_vec(x, f), expected, rtol=0, atol=1e-15)

    def test_hull_exhaustive_placements(self):
        # every way of placing f huge values among n=7 slots
        honest = np.array([0.3, -1.2, 2.0, 0.7, 1.1])
        for positions in itertools.combinations(range(7), 2):
            for sign in itertools.product([-1e9, 1e9], repeat=2):
                x = np.empty(7)
                mask = np.zeros(7, bool)
                mask[list(positions)] = True
                x[mask] = sign
                x[~mask] = honest
                assert honest.min() <= trimmed_mean(x, 2) <= honest.max()

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 4).flatmap(lambda f: st.tuples(st.just(f), arrays(np.float64, st.integers(2 * f + 1, 3 * f + 1).map(lambda k: k), elements=vals))), st.lists(vals, min_size=0, max_size=4))
    def test_hull_property(self, case, adversarial):
        f, honest = case
        adv = np.array(adversarial[:f]) * 1e3
        x = np.concatenate([honest, adv])
        if x.size <= 2 * f:
            return
        out = trimmed_mean(x, f)
        if adv.size <= f and honest.size > 2 * f - adv.size:
            tol = 1e-9 * max(1.0, np.abs(honest).max())
            assert honest.min() - tol <= out <= honest.max() + tol

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(3, 12), elements=vals), st.floats(-1e3, 1e3))
    def test_translation(self, x, c):
        f = (x.size - 1) // 3
        assert trimmed_mean(x + c, f) == pytest.approx(trimmed_mean(x, f) + c, abs=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 12), elements=vals))
    def test_f0_is_fedavg(self, x):
        assert trimmed_mean(x, 0) == pytest.approx(fedavg(x)[0], rel=1e-12, abs=1e-9)


class TestFedAvg:
    def test_uniform(self):
        assert fedavg([0.0, 2.0])[0] == 1.0

    def test_single(self):
        assert fedavg([[3.0, 4.0]]).tolist() == [3.0, 4.0]

    def test_weighted(self):
        assert fedavg([4.0, 0.0], [0.25, 0.75])[0] == 1.0

    def test_length_mismatch(self):
        with pytest.raises(AggregationError):
            fedavg([1.0, 2.0], [1.0])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(1, 10), elements=vals), st.floats(-1e3, 1e3))
    def test_translation(self, x, c):
        assert fedavg(x + c)[0] == pytest.approx(fedavg(x)[0] + c, abs=1e-6)


class TestKrum:
    def test_identical(self):
        assert krum(np.ones((4, 2)), 1).tolist() == [1.0, 1.0]

    def test_never_outlier(self):
        out = krum([0.0, 0.1, 0.2, 100.0], 1, subset_size=2)
        assert out[0] in (0.0, 0.1, 0.2)

    def test_enumerated_scores(self):
        np.testing.assert_allclose(K.krum_scores(np.array([[0.0], [1.0], [5.0]]), 1), [1.0, 1.0, 16.0])
        assert krum([0.0, 1.0, 5.0], 0, subset_size=1)[0] == 0.0

    def test_subset_default(self):
        assert krum_subset(10, 2) == 8
        assert krum_subset(10, 2, "n-f-2") == 6
        assert krum_subset(3, 0) == 2

    def test_needs_two(self):
        with pytest.raises(AggregationError):
            krum([1.0], 0)

    def test_bad_subset(self):
        with pytest.raises(AggregationError):
            krum([1.0, 2.0, 3.0], 0, subset_size=3)

    def test_permutation_distinct_scores(self, rng):
        x = rng.standard_normal((7, 3))
        perm = rng.permutation(7)
        assert np.array_equal(krum(x, 2), krum(x[perm], 2))


class TestMedian:
    def test_odd(self):
        assert coordinate_median([1.0, 2.0, 3.0])[0] == 2.0

    def test_even(self):
        assert coordinate_median([1.0, 2.0, 3.0, 100.0])[0] == 2.5

    def test_per_coordinate(self, rng):
        x = rng.standard_normal((6, 2))
        expected = [np.sort(x[:, c])[2:4].mean() for c in range(2)]
        np.testing.assert_allclose(coordinate_median(x), expected)

    def test_empty(self):
        with pytest.raises(AggregationError):
            coordinate_median(np.empty((0, 2)))


class TestFLTrust:
    def test_self(self):
        own = np.array([1.0, 2.0])
        np.testing.assert_allclose(fltrust(own, [own]), own)

    def test_antiparallel(self):
        own = np.array([1.0, 2.0])
        assert np.array_equal(fltrust(own, [-own, -2 * own]), own)

    def test_scalar_example(self):
        assert fltrust([2.0], [[4.0], [-3.0]]).tolist() == [2.0]

    def test_zero_own(self):
        assert fltrust([0.0, 0.0], [[1.0, 1.0]]).tolist() == [0.0, 0.0]


class TestSCClip:
    def test_all_equal(self):
        own = np.array([0.5, -0.5])
        np.testing.assert_allclose(scclip(own, [own, own], 0.1), own)

    def test_single_within(self):
        np.testing.assert_allclose(scclip([0.0], [[0.5]], 1.0), [0.5])

    def test_clipped(self):
        assert scclip([0.0], [[10.0]], 1.0)[0] == 1.0

    def test_tau_positive(self):
        with pytest.raises(AggregationError):
            scclip([0.0], [[1.0]], 0.0)


class TestRuleBatch:
    @pytest.mark.parametrize("kind", ["trimmed_mean", "fedavg", "krum", "coordinate_median", "fltrust", "scclip"])
    def test_batch_matches_single(self, kind, rng):
        rule = AggregationRule(kind, f=2, scclip_tau=0.5)
        m, n, d = 6, 10, 3
        values = rng.standard_normal((m, n, d))
        mask = rng.random((m, n)) > 0.15
        mask[:, :8] = True
        own = rng.standard_normal((m, d))
        f_local = rng.integers(0, 3, size=m)
        out = rule.aggregate_batch(values, mask, own, f_local)
        for r in range(m):
            ref = rule.aggregate(values[r, mask[r]], own=own[r], f=int(f_local[r]))
            np.testing.assert_allclose(out[r], ref, rtol=1e-12, atol=1e-12)

    def test_unknown_rule(self):
        with pytest.raises(ConfigurationError):
            AggregationRule("mean")

    def test_batch_precondition(self):
        with pytest.raises(AggregationError):
            AggregationRule("trimmed_mean").aggregate_batch(np.zeros((1, 4, 1)), np.ones((1, 4), bool), np.zeros((1, 1)), [2])

    @pytest.mark.parametrize("kind", ["trimmed_mean", "fedavg", "coordinate_median", "fltrust", "scclip"])
    def test_permutation_invariance(self, kind, rng):
        rule = AggregationRule(kind, f=2, scclip_tau=0.7)
        x = rng.standard_normal((9, 4))
        own = rng.standard_normal(4)
        perm = rng.permutation(9)
        np.testing.assert_allclose(rule.aggregate(x, own=own), rule.aggregate(x[perm], own=own), rtol=1e-12, atol=1e-14)


needs_numba = pytest.mark.skipif(not K._HAVE_NUMBA, reason="numba unavailable")


@needs_numba
class TestBackendParity:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5), st.integers(3, 13), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_trimmed_mean(self, m, n, d, seed):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((m, n, d)) * 10 ** rng.uniform(-3, 3)
        mask = np.ones((m, n), bool)
        mask[:, 2:] = rng.random((m, n - 2)) > 0.3 if n > 2 else True
        f = np.array([rng.integers(0, (c - 1) // 2 + 1) for c in mask.sum(1)])
        np.testing.assert_allclose(K.trimmed_mean_batch_nb(v, mask, f), K.trimmed_mean_batch_np(v, mask, f), rtol=1e-12, atol=1e-300)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 13), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_median(self, m, n, d, seed):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((m, n, d))
        mask = np.ones((m, n), bool)
        mask[:, 1:] = rng.random((m, n - 1)) > 0.3
        np.testing.assert_allclose(K.median_batch_nb(v, mask), K.median_batch_np(v, mask), rtol=1e-14)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5), st.integers(2, 13), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_krum(self, m, n, d, seed):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((m, n, d))
        mask = np.ones((m, n), bool)
        subset = rng.integers(1, n, size=m)
        np.testing.assert_array_equal(K.krum_batch_nb(v, mask, subset), K.krum_batch_np(v, mask, subset))

    def test_td0_path(self, rng):
        S, J = 3, 2
        pi = np.cumsum(np.full((S, J), 0.5), axis=1)
        P = np.cumsum(rng.dirichlet(np.ones(S), size=(S, J)), axis=2)
        P[..., -1] = 1.0
        args = (pi, P, rng.uniform(-1, 1, (S, J)), rng.uniform(0.5, 1, (S, 2)) / 2, 0.5, 1.0, True, 0, rng.random((3000, 2)))
        np.testing.assert_allclose(K.td0_path_nb(*args), K.td0_path_np(*args), rtol=1e-10)

    def test_krum_attack_lambda(self, rng):
        for _ in range(200):
            b = rng.standard_normal((int(rng.integers(1, 9)), 3))
            f = int(rng.integers(1, 3))
            k = int(rng.integers(1, b.shape[0] + f))
            assert K.krum_attack_lambda_nb(b, f, k, 10.0, 30) == pytest.approx(K.krum_attack_lambda_np(b, f, k, 10.0, 30), abs=1e-9)


def test_env_flag_selects_numpy():
    code = "from bdtd import _kernels; print(_kernels.backend())"
    env = {**os.environ, "BDTD_NUMBA": "0"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
