import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bdtd import ConfigurationError, FixedPointSpec, consensus_error, delta_metric, exact_value_function, two_execution_gap, weight_support_bound, lambda_metric, lstd_fixed_point, make_random_mdp, NetworkedMdp, msbe, sbe, uniform_policy, verify_product_bound, weighted_fixed_point
from bdtd.features import FeatureMap, constant_features, random_unit_features, scalar_features, tabular_features
from bdtd.metrics import consensus_deviation, td0_estimate, uniform_weights
from bdtd.verify import random_row_stochastic

finite = st.floats(-1e3, 1e3, allow_nan=False)


class TestSbe:
    def test_bellman_solution_zero(self):
        # w solves r + gamma*phi'w = phi w at this sample
        gamma, phi, phi2, r = 0.5, np.array([1.0]), np.array([1.0]), 1.0
        w = r / (phi[0] - gamma * phi2[0])
        assert sbe(np.full((3, 1), w), phi, phi2, [r, r, r], gamma) == 0.0

    def test_one_agent(self):
        assert sbe([[0.0]], [1.0], [1.0], [1.0], 0.9) == 1.0

    def test_two_residuals(self):
        # rbar = 1; residuals 1 and 3 come from w = 0 and a w giving an extra 2
        assert sbe([[0.0], [-2.0]], [1.0], [0.0], [0.5, 1.5], 0.9) == 5.0

    def test_empty(self):
        with pytest.raises(ConfigurationError):
            sbe(np.empty((0, 1)), [1.0], [1.0], [], 0.9)


class TestMsbe:
    def test_constant(self):
        assert msbe(np.full(50, 0.3)) == pytest.approx(0.3)

    def test_pair(self):
        assert msbe([0.0, 2.0], 2) == 1.0
        assert msbe([0.0, 2.0], 1) == 0.0

    def test_k0(self):
        with pytest.raises(ConfigurationError):
            msbe([1.0], 0)
        with pytest.raises(ConfigurationError):
            msbe([1.0], 2)

    def test_exact_solution_one_state(self):
        # 1 state, phi = 1: the exact value satisfies every sample
        gamma, r = 0.8, 0.4
        w = r / (1 - gamma)
        series = [sbe(np.full((4, 1), w), [1.0], [1.0], [r] * 4, gamma) for _ in range(10)]
        assert msbe(series) == pytest.approx(0.0, abs=1e-28)


class TestConsensusError:
    def test_identical(self):
        assert consensus_error(np.ones((5, 3))) == 0.0

    def test_pair(self):
        assert consensus_error([0.0, 2.0]) == 1.0

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 4)), elements=finite), arrays(np.float64, 4, elements=finite))
    def test_translation_invariant(self, P, c):
        shifted = P + c[: P.shape[1]]
        assert consensus_error(shifted) == pytest.approx(consensus_error(P), rel=1e-9, abs=1e-6)


def _const_mdp(n, rewards):
    mdp = make_random_mdp(3, n, 1, seed=n)
    return mdp.with_rewards(np.asarray(rewards, dtype=float), r_max=float(n))


class TestWeightedFixedPoint:
    @pytest.mark.parametrize("n", [4, 7, 10])
    def test_execution_targets(self, n):
        mdp = _const_mdp(n, np.arange(1, n + 1))
        pol, phi = uniform_policy(mdp.action_counts), constant_features(3)
        w1 = weighted_fixed_point(FixedPointSpec(mdp, pol, phi, uniform_weights(n, range(1, n))))
        w2 = weighted_fixed_point(FixedPointSpec(mdp, pol, phi, uniform_weights(n, range(n - 1))))
        assert w1[0] == pytest.approx((n * (n + 1) - 2) / (2 * (n - 1)), abs=1e-12)
        assert w2[0] == pytest.approx(n / 2, abs=1e-12)
        if n == 4:
            assert w1[0] == pytest.approx(3.0, abs=1e-12) and w2[0] == pytest.approx(2.0, abs=1e-12)

    def test_zero_rewards(self):
        mdp = _const_mdp(3, np.zeros(3))
        spec = FixedPointSpec(mdp, uniform_policy(mdp.action_counts), random_unit_features(3, 2, 0), np.full(3, 1 / 3))
        assert np.all(weighted_fixed_point(spec) == 0)

    def test_linear_in_alpha(self, small_setup, rng):
        mdp, pol, phi = small_setup
        singles = np.array([weighted_fixed_point(FixedPointSpec(mdp, pol, phi, np.eye(4)[i])) for i in range(4)])
        for _ in range(10):
            a = rng.dirichlet(np.ones(4))
            np.testing.assert_allclose(weighted_fixed_point(FixedPointSpec(mdp, pol, phi, a)), a @ singles, rtol=1e-12, atol=1e-14)
        uniform = weighted_fixed_point(FixedPointSpec(mdp, pol, phi, np.full(4, 0.25)))
        np.testing.assert_allclose(uniform, singles.mean(axis=0), rtol=1e-12)

    def test_bad_weights(self, small_setup):
        mdp, pol, phi = small_setup
        with pytest.raises(ConfigurationError):
            FixedPointSpec(mdp, pol, phi, [0.5, 0.5, 0.5, -0.5])
        with pytest.raises(ConfigurationError):
            FixedPointSpec(mdp, pol, phi, [1.0, 0.0])

    def test_admissibility(self, small_setup):
        mdp, pol, phi = small_setup
        spec = FixedPointSpec(mdp, pol, phi, [0.4, 0.4, 0.2, 0.0])
        assert spec.support_count(0.2) == 3
        assert spec.is_admissible(3, 0.2) and not spec.is_admissible(3, 0.3)


class TestLstd:
    def test_one_state(self):
        mdp = make_random_mdp(1, 1, 1, seed=0, discount=0.5).with_rewards([1.0])
        assert lstd_fixed_point(mdp, uniform_policy((1,)), constant_features(1), [1.0])[0] == pytest.approx(2.0, abs=1e-12)

    def test_tabular_is_exact(self, small_setup, rng):
        mdp, pol, _ = small_setup
        a = rng.dirichlet(np.ones(4))
        np.testing.assert_allclose(lstd_fixed_point(mdp, pol, tabular_features(5), a), exact_value_function(mdp, pol, a), atol=1e-10)

    def test_rank_deficient_features_refused(self):
        with pytest.raises(ConfigurationError, match="full rank"):
            FeatureMap(np.column_stack([np.ones(5), np.ones(5)]) / 2)

    def test_td0_limit_small(self):
        # quick version of the acceptance check: one seed, fewer steps, looser bound
        mdp = make_random_mdp(3, 1, 2, seed=100, discount=0.5)
        pol = uniform_policy(mdp.action_counts)
        phi = random_unit_features(3, 2, 100)
        target = lstd_fixed_point(mdp, pol, phi, [1.0])
        est = td0_estimate(mdp, pol, phi, [1.0], 20_000, seed=0, eta0=2.0)
        assert np.max(np.abs(est - target)) < 0.1

    def test_td0_bad_args(self, small_setup):
        mdp, pol, phi = small_setup
        with pytest.raises(ConfigurationError):
            td0_estimate(mdp, pol, phi, np.full(4, 0.25), 0)
        with pytest.raises(ConfigurationError):
            td0_estimate(mdp, pol, phi, np.full(4, 0.25), 10, schedule="cosine")


def brute_delta(X):
    n = X.shape[0]
    return max(abs(X[a, j] - X[b, j]) for j in range(n) for a in range(n) for b in range(n))


def brute_lambda(X):
    n = X.shape[0]
    return 1 - min(sum(min(X[a, j], X[b, j]) for j in range(n)) for a in range(n) for b in range(n))


class TestMatrixMetrics:
    def test_uniform(self):
        X = np.full((4, 4), 0.25)
        assert delta_metric(X) == 0.0 and lambda_metric(X) == pytest.approx(0.0, abs=1e-15)

    def test_identity(self):
        assert delta_metric(np.eye(2)) == 1.0 and lambda_metric(np.eye(2)) == 1.0

    def test_brute_force(self, rng):
        for _ in range(200):
            X = random_row_stochastic(rng, 3)
            d, lam = delta_metric(X), lambda_metric(X)
            assert d == pytest.approx(brute_delta(X), abs=1e-15)
            assert lam == pytest.approx(brute_lambda(X), abs=1e-15)
            assert 0 <= d <= lam + 1e-15 <= 1 + 1e-15

    def test_deviation_bound(self, rng):
        for n in range(2, 7):
            for _ in range(50):
                X = random_row_stochastic(rng, n)
                assert consensus_deviation(X) <= n * delta_metric(X) + 1e-12

    def test_rejects_non_stochastic(self):
        with pytest.raises(ConfigurationError):
            delta_metric(np.array([[0.5, 0.6], [0.5, 0.5]]))
        with pytest.raises(ConfigurationError):
            lambda_metric(np.ones((2, 3)) / 3)

    def test_product_m1(self, rng):
        X = random_row_stochastic(rng, 4)
        rep = verify_product_bound([X])
        assert rep.passed and rep.lhs == pytest.approx(delta_metric(X))

    def test_product_uniform(self):
        rep = verify_product_bound([np.full((3, 3), 1 / 3)] * 4)
        assert rep.passed and rep.lhs == pytest.approx(0.0, abs=1e-15) and rep.rhs == pytest.approx(0.0, abs=1e-15)

    def test_product_random(self, rng):
        for _ in range(300):
            n, m = int(rng.integers(2, 7)), int(rng.integers(1, 9))
            assert verify_product_bound([random_row_stochastic(rng, n) for _ in range(m)]).passed

    def test_product_sizes(self):
        with pytest.raises(ConfigurationError):
            verify_product_bound([np.eye(2), np.eye(3)])
        with pytest.raises(ConfigurationError):
            verify_product_bound([])


class TestTwoExecutionGap:
    @pytest.mark.parametrize("n", [4, 7, 10])
    def test_constant_features(self, n):
        mdp = make_random_mdp(3, n, 1, seed=n)
        rep = two_execution_gap(n, constant_features(3), mdp, uniform_policy(mdp.action_counts), horizon=50)
        assert rep.w1[0] == pytest.approx((n * (n + 1) - 2) / (2 * (n - 1)), abs=1e-10)
        assert rep.w2[0] == pytest.approx(n / 2, abs=1e-10)
        assert rep.gap_ok and rep.traces_identical and rep.passed

    def test_half_features(self):
        mdp = make_random_mdp(3, 4, 1, seed=0)
        rep = two_execution_gap(4, constant_features(3, 0.5), mdp, uniform_policy(mdp.action_counts), horizon=50)
        assert rep.gap[0] == pytest.approx(0.5, abs=1e-10)

    def test_scalar_features(self):
        mdp = make_random_mdp(4, 7, 2, seed=1)
        phi = scalar_features(4, 2)
        rep = two_execution_gap(7, phi, mdp, uniform_policy(mdp.action_counts), horizon=100)
        assert rep.passed and rep.gap[0] == pytest.approx(rep.expected_gap[0], abs=1e-10)

    def test_inapplicable(self):
        # symmetric two-state chain, features +0.5 / -0.5: E[phi] = 0
        mdp = NetworkedMdp(np.full((2, 1, 2), 0.5), np.zeros((4, 2, 1)), (1,) * 4, 0.9)
        rep = two_execution_gap(4, FeatureMap(np.array([[0.5], [-0.5]])), mdp, uniform_policy(mdp.action_counts), simulate=False)
        assert not rep.applicable and not rep.passed and rep.notes

    def test_small_n(self):
        mdp = make_random_mdp(3, 3, 1, seed=0)
        rep = two_execution_gap(3, constant_features(3), mdp, uniform_policy(mdp.action_counts))
        assert rep.traces_identical is None and rep.passed
        with pytest.raises(ConfigurationError):
            two_execution_gap(2, constant_features(3), make_random_mdp(3, 2, 1, seed=0), uniform_policy((1, 1)))

    def test_record(self):
        mdp = make_random_mdp(3, 4, 1, seed=0)
        rec = two_execution_gap(4, constant_features(3), mdp, uniform_policy(mdp.action_counts), horizon=20).as_record()
        assert rec["passed"] and rec["w1"] == [pytest.approx(3.0)]


class TestWeightSupportBound:
    @pytest.mark.parametrize("n,f,q", [(7, 2, 2), (10, 3, 3), (4, 1, 1), (13, 4, 2)])
    def test_triples(self, n, f, q):
        rep = weight_support_bound(n, f, q)
        assert rep.forced_zero == list(range(1, f + 1))
        assert rep.max_support == (n - q) - f == rep.bound
        assert rep.lp_agrees and rep.passed

    def test_n7(self):
        rep = weight_support_bound(7, 2, 2)
        assert rep.bound == 3

    def test_uniform_middle_feasible(self):
        n, f, q = 10, 3, 3
        rep = weight_support_bound(n, f, q)
        r = rep.rewards[: n - q]
        alpha = np.zeros(n - q)
        alpha[f:] = 1 / (n - q - f)
        assert alpha @ r == pytest.approx(f + 1, abs=1e-12)

    def test_lp_path(self):
        rep = weight_support_bound(16, 5, 3, enumerate_up_to=10)
        assert rep.method == "linear programming" and rep.passed

    @pytest.mark.parametrize("n,f,q", [(6, 2, 1), (7, 0, 0), (7, 2, 3), (7, 2, 0)])
    def test_invalid(self, n, f, q):
        with pytest.raises(ConfigurationError):
            weight_support_bound(n, f, q)

    def test_exhaustive_small(self):
        for f in range(1, 4):
            for n in range(3 * f + 1, 3 * f + 4):
                for q in range(1, f + 1):
                    assert weight_support_bound(n, f, q).passed
