import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pbsurrogate import _kernels
from pbsurrogate.bounds import BoundConstants
from pbsurrogate.exceptions import DiagnosticsError, SupportError
from pbsurrogate.gibbs import (
    COMPONENTWISE, GibbsConfig, PosteriorSamples, exact_finite_posterior, finite_posterior_from_risks,
    load_samples, log_gibbs_unnormalized, posterior_mean, run_chain, save_samples,
)
from pbsurrogate.losses import Dataset, empirical_risk
from pbsurrogate.priors import FactorState, IsotropicGaussian, ScaledStudent, log_density_unnormalized

from _targets import LAM, quadrature_cdf, region_edges, total_variation_on_regions, two_basin_problem


def _enumerate(risks, weights, lam, dps=50):
    mpmath.mp.dps = dps
    terms = [mpmath.mpf(w) * mpmath.exp(-mpmath.mpf(lam) * mpmath.mpf(r)) for r, w in zip(risks, weights)]
    Z = mpmath.fsum(terms)
    return np.array([float(t / Z) for t in terms])


class TestConfig:
    def test_from_constants(self):
        cfg = GibbsConfig.from_constants(BoundConstants(B_loss=2.0, L_lip=1.0, K_bernstein=0.5), 100)
        assert cfg.lam == 50.0

    @pytest.mark.parametrize("kw", [dict(burn_in=10, n_steps=10), dict(thin=0), dict(lam=-1.0), dict(sampler="x")])
    def test_invalid(self, kw):
        base = dict(lam=1.0, n_steps=100, burn_in=10)
        base.update(kw)
        with pytest.raises(ValueError):
            GibbsConfig(**base)


class TestLogGibbs:
    def test_zero_lambda_is_prior(self, rng):
        data = Dataset(rng.standard_normal((10, 3)), rng.choice([-1.0, 1.0], 10))
        prior = ScaledStudent(0.1, 5.0, 3)
        th = rng.standard_normal(3) * 0.1
        assert log_gibbs_unnormalized(th, data, "hinge", prior, 0.0) == log_density_unnormalized(prior, th)

    def test_support_error(self, rng):
        data = Dataset(rng.standard_normal((10, 2)), rng.choice([-1.0, 1.0], 10))
        with pytest.raises(SupportError):
            log_gibbs_unnormalized(np.array([3.0, 3.0]), data, "hinge", ScaledStudent(0.1, 1.0, 2), 1.0)


class TestFinitePosterior:
    def test_two_point(self):
        w = finite_posterior_from_risks([0.0, 1.0], [0.5, 0.5], math.log(3))
        np.testing.assert_allclose(w, [0.75, 0.25], atol=1e-15)

    def test_single_and_uniform(self):
        np.testing.assert_array_equal(finite_posterior_from_risks([0.3], [1.0], 5.0), [1.0])
        np.testing.assert_allclose(finite_posterior_from_risks([0.2] * 4, [0.25] * 4, 7.0), [0.25] * 4)

    def test_errors(self):
        with pytest.raises(ValueError):
            finite_posterior_from_risks([], [], 1.0)
        with pytest.raises(ValueError):
            finite_posterior_from_risks([0.1, 0.2], [0.7, 0.7], 1.0)
        with pytest.raises(ValueError):
            finite_posterior_from_risks([0.1, 0.2], [1.0, 0.0], 1.0)

    def test_matches_extended_precision(self, rng):
        risks = rng.uniform(0, 1, 8)
        weights = rng.dirichlet(np.ones(8))
        weights /= weights.sum()
        np.testing.assert_allclose(finite_posterior_from_risks(risks, weights, 10.0), _enumerate(risks, weights, 10.0),
                                   rtol=0, atol=1e-12)

    def test_exact_from_data(self, rng):
        data = Dataset(rng.standard_normal((40, 2)), rng.choice([-1.0, 1.0], 40))
        thetas = [rng.standard_normal(2) for _ in range(5)]
        risks = [empirical_risk("hinge", data, t) for t in thetas]
        got = exact_finite_posterior(thetas, np.full(5, 0.2), data, "hinge", 3.0)
        np.testing.assert_allclose(got, _enumerate(risks, [0.2] * 5, 3.0), atol=1e-12)
        with pytest.raises(ValueError):
            exact_finite_posterior([], [], data, "hinge", 1.0)

    @given(st.lists(st.floats(0, 10), min_size=2, max_size=12), st.floats(-50, 50), st.floats(0, 100))
    def test_normalized_and_shift_invariant(self, risks, shift, lam):
        w = np.full(len(risks), 1.0 / len(risks))
        a = finite_posterior_from_risks(risks, w, lam)
        b = finite_posterior_from_risks(np.array(risks) + shift, w, lam)
        assert abs(a.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)

    @given(st.integers(0, 1000))
    @settings(max_examples=30)
    def test_minimizer_mass_increases_with_lambda(self, seed):
        rng = np.random.default_rng(seed)
        risks = rng.uniform(0, 1, 6)
        risks[2] = risks.min() - 0.1
        w = rng.dirichlet(np.ones(6))
        w /= w.sum()
        masses = [finite_posterior_from_risks(risks, w, lam)[2] for lam in (0.0, 1.0, 5.0, 20.0)]
        assert all(b > a for a, b in zip(masses, masses[1:]))


class TestJointChain:
    def test_prior_moments(self):
        cfg = GibbsConfig(lam=0.0, n_steps=60_000, burn_in=2_000, seed=1)
        data = Dataset(np.zeros((1, 2)), np.ones(1))
        s = run_chain(cfg, data, "hinge", IsotropicGaussian(1.0, 2))
        np.testing.assert_allclose(np.cov(s.draws.T), np.eye(2), atol=0.1)
        assert 0.1 < s.acceptance_rate < 0.6

    def test_diagnostics_error(self, rng):
        data = Dataset(rng.standard_normal((50, 2)), rng.choice([-1.0, 1.0], 50))
        cfg = GibbsConfig(lam=10.0, n_steps=500, burn_in=0, proposal_scale=1e4, adapt=False, seed=0)
        with pytest.raises(DiagnosticsError) as exc:
            run_chain(cfg, data, "hinge", IsotropicGaussian(1.0, 2))
        assert exc.value.acceptance_rate < 0.01

    def test_draws_respect_support(self):
        data, prior = two_basin_problem()
        s = run_chain(GibbsConfig(lam=LAM, n_steps=5_000, burn_in=500, seed=3), data, "hinge", prior)
        assert np.all(np.abs(s.draws).sum(axis=1) <= prior.C1)

    def test_two_basin_masses(self):
        data, prior = two_basin_problem()
        s = run_chain(GibbsConfig(lam=LAM, n_steps=100_000, burn_in=2_000, seed=11), data, "hinge", prior)
        cdf = quadrature_cdf(data, prior)
        assert total_variation_on_regions(s.draws[:, 0], cdf, region_edges(prior.C1)) < 0.05

    def test_warm_start_outside_support(self):
        data, prior = two_basin_problem()
        with pytest.raises(SupportError):
            run_chain(GibbsConfig(lam=1.0, n_steps=10, burn_in=1, init=[10.0]), data, "hinge", prior)

    def test_zero_one_rejected(self):
        data, prior = two_basin_problem()
        with pytest.raises(ValueError):
            run_chain(GibbsConfig(lam=1.0, n_steps=10, burn_in=1), data, "zero_one", prior)


class TestComponentwiseChain:
    def test_compiled_kernel_matches_interpreted(self, rng):
        n, d, k = 30, 4, 5
        ZT = rng.standard_normal((d, n))
        args = lambda: (
            np.zeros(d), np.zeros(n), ZT, 7.0, _kernels.HINGE, 50.0, _kernels.STUDENT, 0.1, 10.0,
            np.full(d, 0.3), 1.0, np.random.default_rng(1).standard_normal((k, d, 2)),
            np.random.default_rng(2).random((k, d, 3)), np.random.default_rng(3).standard_t(3, (k, d)), True,
            np.zeros(d),
        )
        fast = _kernels.coordinate_sweeps(*args())
        slow = _kernels.coordinate_sweeps.py_func(*args())
        np.testing.assert_allclose(fast, slow, rtol=1e-12, atol=1e-14)

    def test_gaussian_target_moments(self, rng):
        # logistic posterior with lam=0 is the Gaussian prior
        data = Dataset(rng.standard_normal((20, 3)), rng.choice([-1.0, 1.0], 20))
        cfg = GibbsConfig(lam=0.0, n_steps=40_000, burn_in=1_000, seed=2, sampler=COMPONENTWISE)
        s = run_chain(cfg, data, "logistic", IsotropicGaussian(2.0, 3))
        m, v = s.draws.mean(axis=0), s.draws.var(axis=0)
        se = 2.0 / math.sqrt(len(s.draws)) * 3  # inflated for autocorrelation
        assert np.all(np.abs(m) < 3 * se)
        np.testing.assert_allclose(v, 4.0, rtol=0.1)

    def test_margins_consistent_with_state(self, rng):
        data = Dataset(rng.standard_normal((40, 3)), rng.choice([-1.0, 1.0], 40))
        cfg = GibbsConfig(lam=40.0, n_steps=300, burn_in=50, seed=4, sampler=COMPONENTWISE, jump_scale=1.0)
        s = run_chain(cfg, data, "hinge", ScaledStudent(0.1, 20.0, 3))
        recomputed = [-40.0 * empirical_risk("hinge", data, th) + log_density_unnormalized(
            ScaledStudent(0.1, 20.0, 3), th) for th in s.draws]
        np.testing.assert_allclose(s.log_unnorm_target, recomputed, rtol=1e-10)

    def test_stationarity_smoke(self):
        data, prior = two_basin_problem()
        short = run_chain(GibbsConfig(lam=LAM, n_steps=20_000, burn_in=1_000, seed=5, sampler=COMPONENTWISE,
                                      jump_scale=1.0), data, "hinge", prior)
        long = run_chain(GibbsConfig(lam=LAM, n_steps=40_000, burn_in=1_000, seed=6, sampler=COMPONENTWISE,
                                     jump_scale=1.0), data, "hinge", prior)
        se = short.draws.std() / math.sqrt(len(short.draws) / 10)
        assert abs(short.draws.mean() - long.draws.mean()) < 3 * se

    def test_rejects_matrix_data(self):
        data = Dataset(np.array([[0, 0]]), np.ones(1), shape=(2, 2))
        with pytest.raises(ValueError):
            run_chain(GibbsConfig(lam=1.0, n_steps=10, burn_in=1, sampler=COMPONENTWISE), data, "hinge",
                      IsotropicGaussian(1.0, 2))


class TestPosteriorMean:
    def test_examples(self):
        v = np.array([1.0, -2.0])
        s = PosteriorSamples(np.array([v, v]), np.zeros(2), 1.0)
        np.testing.assert_array_equal(posterior_mean(s), v)
        s = PosteriorSamples(np.array([v, -v]), np.zeros(2), 1.0)
        np.testing.assert_array_equal(posterior_mean(s), 0.0)

    def test_factor_states_average_products(self, rng):
        states = [FactorState(rng.standard_normal((3, 2)), rng.standard_normal((4, 2)), np.ones(2)) for _ in range(5)]
        s = PosteriorSamples(states, np.zeros(5), 1.0)
        np.testing.assert_allclose(posterior_mean(s), np.mean([st.product() for st in states], axis=0))

    def test_prior_chain_mean_near_zero(self):
        data = Dataset(np.zeros((1, 2)), np.ones(1))
        s = run_chain(GibbsConfig(lam=0.0, n_steps=30_000, burn_in=1_000, seed=8), data, "hinge",
                      IsotropicGaussian(1.0, 2))
        se = 1.0 / math.sqrt(len(s.draws) / 20)  # effective sample size allowance
        assert np.linalg.norm(posterior_mean(s)) <= 3 * se

    def test_empty(self):
        with pytest.raises(ValueError):
            posterior_mean(PosteriorSamples(np.zeros((0, 2)), np.zeros(0), 1.0))


class TestSerialization:
    def test_round_trip(self, tmp_path):
        data, prior = two_basin_problem()
        s = run_chain(GibbsConfig(lam=LAM, n_steps=200, burn_in=20, seed=1), data, "hinge", prior)
        save_samples(s, tmp_path / "s.csv")
        back = load_samples(tmp_path / "s.csv")
        np.testing.assert_array_equal(back.draws, s.draws)
        np.testing.assert_array_equal(back.log_unnorm_target, s.log_unnorm_target)
        assert back.acceptance_rate == s.acceptance_rate
        assert back.info["config"]["seed"] == 1
