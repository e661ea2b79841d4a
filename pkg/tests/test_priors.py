import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pbsurrogate.exceptions import SamplingError, SupportError
from pbsurrogate.priors import (
    FactorState, IsotropicGaussian, LowRankHier, ScaledStudent, TranslatedPrior, log_density_unnormalized,
    prior_from_dict, prior_to_dict, sample_prior, sample_translated,
)


class TestValidation:
    def test_student_requires_large_ball(self):
        with pytest.raises(ValueError):
            ScaledStudent(tau=0.5, C1=1.0, d=1)
        ScaledStudent(tau=0.4, C1=1.0, d=1)

    def test_positive_scales(self):
        with pytest.raises(ValueError):
            IsotropicGaussian(0.0, 2)
        with pytest.raises(ValueError):
            LowRankHier(3, 3, 2, a=1.0, b=-1.0)


class TestLogDensity:
    def test_examples(self):
        assert log_density_unnormalized(ScaledStudent(1.0, 10.0, 2), np.zeros(2)) == 0.0
        assert log_density_unnormalized(IsotropicGaussian(1.0, 3), np.zeros(3)) == 0.0
        val = log_density_unnormalized(ScaledStudent(0.1, 10.0, 1), np.array([0.3]))
        assert val == pytest.approx(-2 * math.log(0.1), rel=1e-14)

    def test_outside_support_raises(self):
        with pytest.raises(SupportError):
            log_density_unnormalized(ScaledStudent(0.1, 1.0, 2), np.array([0.6, 0.6]))

    def test_hier_nonpositive_gamma_raises(self):
        prior = LowRankHier(2, 3, 2, 1.0, 1.0)
        state = FactorState(np.zeros((2, 2)), np.zeros((3, 2)), np.array([1.0, 0.0]))
        with pytest.raises(SupportError):
            log_density_unnormalized(prior, state)

    def test_hier_matches_scipy(self, rng):
        from scipy import stats

        prior = LowRankHier(3, 4, 2, a=2.5, b=0.7)
        st_ = sample_prior(prior, rng)
        ref = sum(stats.invgamma.logpdf(g, 2.5, scale=0.7) for g in st_.gamma)
        ref += sum(stats.norm.logpdf(st_.L[:, k], scale=math.sqrt(g)).sum() + stats.norm.logpdf(
            st_.R[:, k], scale=math.sqrt(g)).sum() for k, g in enumerate(st_.gamma))
        # differences between two states cancel every constant
        st2 = sample_prior(prior, rng)
        ref2 = sum(stats.invgamma.logpdf(g, 2.5, scale=0.7) for g in st2.gamma)
        ref2 += sum(stats.norm.logpdf(st2.L[:, k], scale=math.sqrt(g)).sum() + stats.norm.logpdf(
            st2.R[:, k], scale=math.sqrt(g)).sum() for k, g in enumerate(st2.gamma))
        got = log_density_unnormalized(prior, st_) - log_density_unnormalized(prior, st2)
        assert got == pytest.approx(ref - ref2, rel=1e-10)

    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_student_symmetric(self, theta):
        prior = ScaledStudent(0.2, 100.0, 3)
        th = np.array(theta)
        assert log_density_unnormalized(prior, th) == log_density_unnormalized(prior, -th)
        assert math.isfinite(log_density_unnormalized(prior, th))


class TestSampling:
    def test_gaussian_norm(self, rng):
        x = sample_prior(IsotropicGaussian(1.0, 10_000), rng)
        assert abs(x @ x / 10_000 - 1.0) < 0.05

    def test_hier_marginal_variance(self, rng):
        prior = LowRankHier(1, 1, 1, a=3.0, b=1.0)
        draws = np.array([sample_prior(prior, rng).L[0, 0] for _ in range(100_000)])
        assert abs(draws.var() - 0.5) < 0.05

    def test_student_median(self, rng):
        from scipy import stats

        prior = ScaledStudent(0.01, 1e6, 20_000)
        x = sample_prior(prior, rng)
        assert np.median(np.abs(x)) == pytest.approx(0.01 / math.sqrt(3) * stats.t(3).ppf(0.75), rel=0.03)

    def test_student_in_ball(self, rng):
        prior = ScaledStudent(0.05, 2.5, 20)
        for _ in range(20):
            assert np.abs(sample_prior(prior, rng)).sum() <= 2.5

    def test_budget_exceeded(self):
        class FarAway:
            def standard_t(self, df, size):
                return np.full(size, 1e3)

        prior = ScaledStudent(1.0, 40.01, 20)
        with pytest.raises(SamplingError) as exc:
            sample_translated(TranslatedPrior(prior, np.zeros(20)), FarAway(), max_proposals=1000)
        assert exc.value.acceptance_rate == 0.0


class TestTranslated:
    def test_support_and_centre(self, rng):
        base = ScaledStudent(0.05, 10.0, 20)
        centre = rng.standard_normal(20)
        draws = sample_translated(TranslatedPrior(base, centre), rng, size=5000)
        assert np.all(np.abs(draws - centre).sum(axis=1) <= 2 * 20 * 0.05)

    def test_zero_centre_mean(self, rng):
        base = ScaledStudent(0.05, 10.0, 5)
        draws = sample_translated(TranslatedPrior(base, np.zeros(5)), rng, size=20_000)
        se = draws.std(axis=0) / math.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0)) < 4 * se)

    @pytest.mark.parametrize("d", [2, 5, 20])
    def test_second_moment_bound(self, rng, d):
        tau = 0.05
        base = ScaledStudent(tau, 10.0 * d, d)
        centre = np.ones(d)
        draws = sample_translated(TranslatedPrior(base, centre), rng, size=20_000)
        sq = np.sum((draws - centre) ** 2, axis=1)
        assert sq.mean() - 3 * sq.std() / math.sqrt(sq.size) <= 4 * d * tau**2


class TestSerialization:
    @pytest.mark.parametrize("prior", [
        IsotropicGaussian(2.0, 3), ScaledStudent(0.1, 5.0, 4), LowRankHier(3, 4, 2, 1.0, 0.5, "gamma"),
    ])
    def test_round_trip(self, prior):
        assert prior_from_dict(prior_to_dict(prior)) == prior
