import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import multivariate_normal

from lavaheat.errors import ConfigError, DataError, NumericError
from lavaheat.estimator import (
    EmOptions, ModelState, SufficientStats, e_step, em_fit, evidence_gain, init_state,
    marginal_log_likelihood, m_step, new_state, recursive_update, select_support, update_stats,
)

from conftest import random_problem


def make_state(stats, theta, d, sigma2):
    K = stats.K
    return ModelState(theta=np.asarray(theta, float), z_hat=np.zeros(K), P=np.zeros((K, K)),
                      d=np.asarray(d, float), sigma2=sigma2, active=np.asarray(d) > 0, stats=stats)


def dense_loglik(Phi, Gamma, y, theta, d, sigma2):
    C = sigma2 * np.eye(len(y)) + Gamma @ np.diag(d) @ Gamma.T
    return multivariate_normal(mean=Phi @ theta, cov=C).logpdf(y)


def dense_posterior(Phi, Gamma, y, theta, d, sigma2):
    """Conditional of z given y from the joint Gaussian."""
    D = np.diag(d)
    Cy = sigma2 * np.eye(len(y)) + Gamma @ D @ Gamma.T
    Czy = D @ Gamma.T
    mean = Czy @ np.linalg.solve(Cy, y - Phi @ theta)
    cov = D - Czy @ np.linalg.solve(Cy, Czy.T)
    return mean, cov


# --------------------------------------------------------------------------
# sufficient statistics

class TestSufficientStats:
    def test_single_sample(self):
        s = update_stats(SufficientStats(1, 1), [1.0], [1.0], 2.0)
        assert s.S_pp.tolist() == [[1.0]]
        assert s.s_py.tolist() == [2.0]
        assert s.s_gy.tolist() == [2.0]
        assert s.s_yy == 4.0 and s.n == 1.0

    def test_update_stats_is_functional(self):
        s0 = SufficientStats(1, 1)
        update_stats(s0, [1.0], [1.0], 2.0)
        assert s0.n == 0 and s0.s_yy == 0.0

    def test_two_identical_samples_double(self, rng):
        phi, gamma, y = rng.normal(size=3), rng.normal(size=4), 1.7
        one = SufficientStats(3, 4).update(phi, gamma, y)
        two = SufficientStats(3, 4).update(phi, gamma, y).update(phi, gamma, y)
        np.testing.assert_array_equal(two.S_gg, 2 * one.S_gg)
        np.testing.assert_array_equal(two.s_py, 2 * one.s_py)
        assert two.s_yy == 2 * one.s_yy and two.n == 2

    def test_forgetting(self, rng):
        phi = rng.normal(size=2)
        s = SufficientStats(2, 0, lam=0.5).update(phi, [], 1.0).update(phi, [], 1.0)
        np.testing.assert_allclose(s.S_pp, 1.5 * np.outer(phi, phi), rtol=1e-15)
        assert s.n == 1.5

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            SufficientStats(2, 3).update([1.0], [1.0, 2.0, 3.0], 0.0)

    def test_bad_lambda(self):
        with pytest.raises(ConfigError):
            SufficientStats(1, 1, lam=0.0)
        with pytest.raises(ConfigError):
            SufficientStats(1, 1, lam=1.5)

    @pytest.mark.parametrize("lam", [1.0, 0.97])
    def test_stream_equals_batch(self, rng, lam):
        Phi, Gamma, y, *_ = random_problem(rng, 300, 3, 6)
        s = SufficientStats(3, 6, lam)
        for i in range(len(y)):
            s.update(Phi[i], Gamma[i], y[i])
        b = SufficientStats.from_batch(Phi, Gamma, y, lam)
        for name in ("S_pp", "S_gg", "S_gp", "s_py", "s_gy"):
            np.testing.assert_allclose(getattr(s, name), getattr(b, name), rtol=1e-10, atol=1e-10)
        assert s.n == pytest.approx(b.n, rel=1e-12)
        assert s.s_yy == pytest.approx(b.s_yy, rel=1e-10)

    def test_batch_matrices_exactly_symmetric(self, rng):
        Phi, Gamma, y, *_ = random_problem(rng, 97, 5, 11)
        b = SufficientStats.from_batch(Phi, Gamma, y)
        np.testing.assert_array_equal(b.S_gg, b.S_gg.T)
        np.testing.assert_array_equal(b.S_pp, b.S_pp.T)


# --------------------------------------------------------------------------
# E-step and likelihood oracles

class TestEStep:
    def test_scalar_example(self):
        # D=[1], sigma2=1, S_gg=[2], s_gy - S_gp theta = [2]
        stats = SufficientStats(1, 1, S_pp=np.ones((1, 1)), S_gg=np.array([[2.0]]),
                                S_gp=np.zeros((1, 1)), s_py=np.zeros(1), s_gy=np.array([2.0]),
                                s_yy=3.0, n=2.0)
        z, P = e_step(make_state(stats, [0.0], [1.0], 1.0))
        np.testing.assert_allclose(P, [[1 / 3]], rtol=1e-14)
        np.testing.assert_allclose(z, [2 / 3], rtol=1e-14)

    def test_no_data_recovers_prior(self):
        stats = SufficientStats(2, 3)
        z, P = e_step(make_state(stats, [0.0, 0.0], [1.0, 2.0, 0.5], 1.0))
        np.testing.assert_array_equal(z, 0.0)
        np.testing.assert_allclose(P, np.diag([1.0, 2.0, 0.5]), rtol=1e-15)

    def test_pruned_component_is_zero(self, rng):
        Phi, Gamma, y, *_ = random_problem(rng, 30, 2, 3)
        stats = SufficientStats.from_batch(Phi, Gamma, y)
        z, P = e_step(make_state(stats, [0.1, 0.2], [1.0, 0.0, 2.0], 0.3))
        assert z[1] == 0.0
        assert not P[1].any() and not P[:, 1].any()

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_dense_posterior(self, seed):
        rng = np.random.default_rng(seed)
        n, p, K = rng.integers(3, 21), rng.integers(1, 4), rng.integers(1, 6)
        Phi, Gamma, y, *_ = random_problem(rng, n, p, K)
        theta = rng.normal(size=p)
        d = rng.uniform(0.05, 3.0, size=K)
        sigma2 = rng.uniform(0.1, 2.0)
        stats = SufficientStats.from_batch(Phi, Gamma, y)
        z, P = e_step(make_state(stats, theta, d, sigma2))
        mean, cov = dense_posterior(Phi, Gamma, y, theta, d, sigma2)
        np.testing.assert_allclose(z, mean, atol=1e-10, rtol=1e-10)
        np.testing.assert_allclose(P, cov, atol=1e-10, rtol=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_loglik_matches_dense(self, seed):
        rng = np.random.default_rng(100 + seed)
        n, p, K = rng.integers(2, 21), rng.integers(1, 4), rng.integers(1, 6)
        Phi, Gamma, y, *_ = random_problem(rng, n, p, K)
        theta, d, sigma2 = rng.normal(size=p), rng.uniform(0.0, 3.0, size=K), rng.uniform(0.1, 2.0)
        stats = SufficientStats.from_batch(Phi, Gamma, y)
        ours = marginal_log_likelihood(stats, theta, d, sigma2)
        ref = dense_loglik(Phi, Gamma, y, theta, d, sigma2)
        assert ours == pytest.approx(ref, rel=1e-10)

    def test_zero_d_is_iid_gaussian(self, rng):
        Phi, Gamma, y, *_ = random_problem(rng, 40, 2, 3)
        theta, sigma2 = np.array([0.3, -0.2]), 0.7
        stats = SufficientStats.from_batch(Phi, Gamma, y)
        r = y - Phi @ theta
        iid = -0.5 * (len(y) * math.log(2 * math.pi * sigma2) + r @ r / sigma2)
        assert marginal_log_likelihood(stats, theta, np.zeros(3), sigma2) == pytest.approx(iid, rel=1e-12)

    def test_negative_prior_variance_rejected(self):
        stats = SufficientStats(1, 1).update([1.0], [1.0], 1.0)
        with pytest.raises(NumericError):
            marginal_log_likelihood(stats, [0.0], [-1.0], 1.0)

    def test_nonpositive_noise_rejected(self):
        stats = SufficientStats(1, 1).update([1.0], [1.0], 1.0)
        with pytest.raises(NumericError):
            marginal_log_likelihood(stats, [0.0], [1.0], 0.0)


# --------------------------------------------------------------------------
# M-step and EM

class TestMStep:
    def test_full_shrinkage_fixed_point(self, rng):
        Phi, Gamma, y, *_ = random_problem(rng, 20, 2, 4)
        stats = SufficientStats.from_batch(Phi, Gamma, y)
        s = make_state(stats, [0.0, 0.0], np.ones(4), 1.0)
        s.z_hat, s.P = np.zeros(4), np.zeros((4, 4))
        out = m_step(s)
        np.testing.assert_array_equal(out.d, 0.0)
        assert not out.active.any()

    def test_exact_fit_floors_sigma2(self):
        phi, y = np.array([1.0, 2.0]), 5.0
        stats = SufficientStats(2, 1).update(phi, [0.0], y)
        s = make_state(stats, [0.0, 0.0], [0.0], 1.0)
        out = m_step(s)
        np.testing.assert_allclose(out.theta @ phi, y, rtol=1e-7)
        assert out.sigma2 == pytest.approx(1e-12 * stats.s_yy / stats.n, rel=1e-3)

    def test_noise_free_linear(self, rng):
        x = rng.normal(size=200)
        Phi = np.column_stack([np.ones(200), x])
        stats = SufficientStats.from_batch(Phi, np.zeros((200, 2)), 2.0 * x)
        state = em_fit(stats, EmOptions(max_iters=200))
        np.testing.assert_allclose(state.theta, [0.0, 2.0], atol=1e-8)

    def test_does_not_mutate_input(self, rng):
        Phi, Gamma, y, *_ = random_problem(rng, 20, 2, 3)
        s = init_state(SufficientStats.from_batch(Phi, Gamma, y))
        s.z_hat, s.P = e_step(s)
        before = s.copy()
        m_step(s)
        np.testing.assert_array_equal(s.theta, before.theta)
        np.testing.assert_array_equal(s.d, before.d)


class TestEmFit:
    def test_monotone_trace(self, rng):
        Phi, Gamma, y, *_ = random_problem(rng, 60, 3, 8, active=[0, 3])
        trace = []
        em_fit(SufficientStats.from_batch(Phi, Gamma, y), EmOptions(max_iters=300), trace=trace)
        assert np.all(np.diff(trace) >= -1e-9 * np.maximum(1.0, np.abs(trace[:-1])))

    def test_final_loglik_matches_dense(self, rng):
        Phi, Gamma, y, *_ = random_problem(rng, 20, 2, 3)
        state = em_fit(SufficientStats.from_batch(Phi, Gamma, y), EmOptions(max_iters=500))
        ref = dense_loglik(Phi, Gamma, y, state.theta, state.d, state.sigma2)
        assert state.loglik == pytest.approx(ref, rel=1e-8)

    def test_deterministic(self, rng):
        Phi, Gamma, y, *_ = random_problem(rng, 80, 3, 10)
        stats = SufficientStats.from_batch(Phi, Gamma, y)
        a, b = em_fit(stats), em_fit(stats)
        np.testing.assert_array_equal(a.theta, b.theta)
        np.testing.assert_array_equal(a.z_hat, b.z_hat)
        np.testing.assert_array_equal(a.d, b.d)

    def test_null_latent_mostly_pruned(self):
        rng = np.random.default_rng(7)
        n, p, K = 500, 3, 40
        Phi = rng.normal(size=(n, p))
        Gamma = rng.normal(size=(n, K))
        signal = Phi @ np.array([2.0, -1.0, 0.5])
        y = signal + rng.normal(size=n) * signal.std() / 10.0  # 20 dB
        state = em_fit(SufficientStats.from_batch(Phi, Gamma, y), EmOptions(selection="bic"))
        assert state.nonzero_params <= 0.1 * K

    def test_invariants(self, rng):
        Phi, Gamma, y, *_ = random_problem(rng, 100, 3, 12, active=[1, 5])
        s = em_fit(SufficientStats.from_batch(Phi, Gamma, y), EmOptions(selection="bic"))
        assert s.sigma2 > 0 and np.all(s.d >= 0)
        assert np.all(s.z_hat[~s.active] == 0) and np.all(s.d[~s.active] == 0)
        idx = np.flatnonzero(s.active)
        assert np.linalg.eigvalsh(s.P[np.ix_(idx, idx)]).min() > -1e-12

    def test_needs_data(self):
        with pytest.raises(DataError):
            em_fit(SufficientStats(2, 2))

    def test_init_dimension_check(self, rng):
        Phi, Gamma, y, *_ = random_problem(rng, 10, 2, 2)
        with pytest.raises(DataError):
            em_fit(SufficientStats.from_batch(Phi, Gamma, y), init=new_state(3, 2))

    def test_options_validated(self):
        with pytest.raises(ConfigError):
            EmOptions(max_iters=0)
        with pytest.raises(ConfigError):
            EmOptions(selection="aic")
        with pytest.raises(ConfigError):
            EmOptions(param_tol=0.0)

    def test_param_tol_runs_past_likelihood_plateau(self, rng):
        Phi, Gamma, y, *_ = random_problem(rng, 200, 3, 6, active=[0, 4])
        stats = SufficientStats.from_batch(Phi, Gamma, y)
        loose = em_fit(stats, EmOptions(selection="bic", rel_tol=1e-15))
        tight = em_fit(stats, EmOptions(selection="bic", rel_tol=1e-15, param_tol=1e-13))
        assert tight.n_iter >= loose.n_iter
        again = em_fit(stats, EmOptions(selection="bic", rel_tol=1e-15, param_tol=1e-13, max_iters=4000))
        np.testing.assert_allclose(tight.z_hat, again.z_hat, atol=1e-11)

    def test_noise_free_nominal_fit_is_exact(self, rng):
        # no latent signal and no noise: theta must be the exact least-squares solution
        n = 300
        Phi = np.column_stack([np.ones(n), rng.uniform(0, 30, size=(n, 3))])
        theta = np.array([30.0, 2.0, 1.0, 0.5])
        state = em_fit(SufficientStats.from_batch(Phi, rng.normal(size=(n, 4)), Phi @ theta),
                       EmOptions(selection="bic"))
        np.testing.assert_allclose(state.theta, theta, rtol=1e-9)

    def test_rank_deficient_nominal_block(self, rng):
        n = 50
        x = rng.normal(size=n)
        Phi = np.column_stack([np.ones(n), x, x])  # duplicated regressor
        state = em_fit(SufficientStats.from_batch(Phi, rng.normal(size=(n, 2)), 1.0 + 2.0 * x),
                       EmOptions(max_iters=50))
        assert np.all(np.isfinite(state.theta))
        np.testing.assert_allclose(Phi @ state.theta, 1.0 + 2.0 * x, atol=1e-5)

    @given(seed=st.integers(0, 2**31), K=st.integers(1, 6), p=st.integers(1, 3))
    def test_property_monotone(self, seed, K, p):
        rng = np.random.default_rng(seed)
        Phi, Gamma, y, *_ = random_problem(rng, 30, p, K)
        trace = []
        em_fit(SufficientStats.from_batch(Phi, Gamma, y), EmOptions(max_iters=100), trace=trace)
        tr = np.array(trace)
        assert np.all(np.diff(tr) >= -1e-9 * np.maximum(1.0, np.abs(tr[:-1])))


class TestSelection:
    def test_gain_matches_likelihood_difference(self, rng):
        """The gain of component k is the log-likelihood lost by dropping it
        when it sits at its optimal prior variance."""
        Phi, Gamma, y, *_ = random_problem(rng, 200, 2, 4, active=[0, 2], noise=1.0)
        state = em_fit(SufficientStats.from_batch(Phi, Gamma, y), EmOptions(max_iters=3000))
        gain = evidence_gain(state)
        for k in np.flatnonzero(state.active):
            d0 = state.d.copy()
            d0[k] = 0.0
            drop = state.loglik - marginal_log_likelihood(state.stats, state.theta, d0, state.sigma2)
            assert gain[k] == pytest.approx(drop, rel=1e-3, abs=1e-3)

    def test_support_recovery(self):
        rng = np.random.default_rng(3)
        Phi, Gamma, y, theta, z = random_problem(rng, 1000, 3, 30, active=[2, 11, 17], noise=0.3)
        s = em_fit(SufficientStats.from_batch(Phi, Gamma, y), EmOptions(selection="bic"))
        assert set(np.flatnonzero(s.active)) == {2, 11, 17}

    def test_collinear_pair_keeps_one(self, rng):
        n = 400
        Phi = np.ones((n, 1))
        g = rng.normal(size=n)
        Gamma = np.column_stack([g, g + 1e-6 * rng.normal(size=n), rng.normal(size=n)])
        y = 3.0 * g + 0.1 * rng.normal(size=n)
        s = em_fit(SufficientStats.from_batch(Phi, Gamma, y), EmOptions(selection="bic"))
        assert s.active[:2].sum() == 1 and not s.active[2]

    def test_selection_in_place_count(self, rng):
        Phi, Gamma, y, *_ = random_problem(rng, 300, 2, 10, active=[0])
        s = em_fit(SufficientStats.from_batch(Phi, Gamma, y), EmOptions(max_iters=50))
        before = s.nonzero_params
        removed = select_support(s)
        assert s.nonzero_params == before - removed


# --------------------------------------------------------------------------
# streaming

class TestRecursiveUpdate:
    def test_zero_samples_predicts_zero(self):
        s = new_state(3, 4)
        assert s.theta @ np.ones(3) == 0.0 and s.z_hat @ np.ones(4) == 0.0

    def test_stream_then_fit_equals_batch(self, rng):
        Phi, Gamma, y, *_ = random_problem(rng, 200, 3, 5, active=[1, 4])
        s = new_state(3, 5)
        for i in range(200):
            recursive_update(s, Phi[i], Gamma[i], y[i])
        opts = EmOptions(max_iters=20000, rel_tol=1e-15)
        streamed = em_fit(s.stats, opts)
        batch = em_fit(SufficientStats.from_batch(Phi, Gamma, y), opts)
        np.testing.assert_allclose(streamed.theta, batch.theta, atol=1e-8)
        np.testing.assert_allclose(streamed.z_hat, batch.z_hat, atol=1e-8)

    def test_zero_innovation_does_not_raise_sigma2(self, rng):
        Phi, Gamma, y, *_ = random_problem(rng, 100, 2, 3)
        s = em_fit(SufficientStats.from_batch(Phi, Gamma, y), EmOptions(max_iters=3000, rel_tol=1e-14))
        phi, gamma = rng.normal(size=2), rng.normal(size=3)
        before = s.sigma2
        recursive_update(s, phi, gamma, float(s.theta @ phi + s.z_hat @ gamma))
        assert s.sigma2 <= before * (1 + 1e-9)

    def test_first_sample_initialises_noise(self):
        s = new_state(1, 1)
        recursive_update(s, [1.0], [1.0], 3.0)
        assert s.sigma2 > 0 and np.isfinite(s.theta).all()
