import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from evdomain import DomainError, GumbelParams, loglik
from evdomain import priors
from evdomain.priors import (FrechetHyper, GumbelHyper, WeibullHyper, log_gumbel_posterior,
                             log_gumbel_prior, log_pi_mu_frechet, log_pi_mu_weibull, s1, s2, s3, s4)

HF = FrechetHyper(5, 100.0, 130.0, 0.0)
HG = GumbelHyper((81.0, 93.0, 101.0))


# -- scale statistics --------------------------------------------------------


def test_scale_statistics_hand_values():
    assert s1(0.0, 1.0, FrechetHyper(1, 100.0, 130.0)) == pytest.approx(0.01, rel=1e-15)
    assert s1(99.0, 0.37, FrechetHyper(2, 100.0, 130.0)) == pytest.approx(2.0, rel=1e-15)
    assert s2(0.0, FrechetHyper(1, 100.0, 130.0)) == pytest.approx(0.2623643, abs=1e-7)
    assert s3(101.0, 2.2, WeibullHyper(3, 100.0, 100.5, 0.01)) == pytest.approx(3.0, rel=1e-15)
    assert s4(200.0, WeibullHyper(1, 100.0, 130.0, 0.01)) == pytest.approx(0.3566749, abs=1e-7)


def test_scale_statistics_structure():
    a, b = FrechetHyper(1, 100.0, 130.0), FrechetHyper(4, 100.0, 130.0)
    assert s1(20.0, 0.6, b) == pytest.approx(4 * s1(20.0, 0.6, a), rel=1e-14)
    assert s2(20.0, b) == pytest.approx(4 * s2(20.0, a), rel=1e-14)
    assert s2(-1e9, a) < 1e-7
    w = WeibullHyper(1, 100.0, 130.0, 0.01)
    assert s4(130.0 + 1e-12, w) > 25.0
    with pytest.raises(DomainError):
        s1(100.0, 1.0, a)


def test_hyper_validation():
    with pytest.raises(DomainError):
        FrechetHyper(1, 130.0, 100.0)
    with pytest.raises(DomainError):
        FrechetHyper(1, 100.0, 130.0, mu_inf=100.0)
    with pytest.raises(DomainError):
        WeibullHyper(1, 100.0, 130.0, 1.5)
    with pytest.raises(DomainError):
        GumbelHyper((1.0, 2.0))
    with pytest.raises(DomainError):
        GumbelHyper((1.0, 3.0, 2.0))


# -- pi(mu) ------------------------------------------------------------------


def _pi_frechet_direct(mu, h):
    # ((x_e2 - mu) / (x_e2 - x_e1) * log((x_e2 - mu) / (x_e1 - mu)))^(-m)
    a = h.x_e2 - h.x_e1
    return ((h.x_e2 - mu) / a * np.log((h.x_e2 - mu) / (h.x_e1 - mu))) ** (-h.m)


def test_pi_mu_frechet_support():
    assert log_pi_mu_frechet(100.5, HF) == -np.inf
    assert log_pi_mu_frechet(-1.0, HF) == -np.inf
    assert np.isfinite(log_pi_mu_frechet(0.0, HF))
    assert np.isfinite(log_pi_mu_frechet(0.0, FrechetHyper(5, 100.0, 130.0, -100.0)))


def test_pi_mu_frechet_series_form():
    mu = np.linspace(-500.0, 99.9, 400)
    h = FrechetHyper(3, 100.0, 130.0, -1000.0)
    np.testing.assert_allclose(np.exp(log_pi_mu_frechet(mu, h)), priors.pi_mu_frechet_series(mu, h),
                               rtol=1e-10, atol=0)
    np.testing.assert_allclose(np.exp(log_pi_mu_frechet(mu, h)), _pi_frechet_direct(mu, h), rtol=1e-10)


def _ks_to_density(draws, density, lo, hi, n=200_001):
    x = np.linspace(lo, hi, n)
    d = density(x)
    cum = integrate.cumulative_trapezoid(d, x, initial=0.0)
    cum /= cum[-1]
    s = np.sort(draws)
    f = np.interp(s, x, cum)
    k = np.arange(1, s.size + 1) / s.size
    return max(np.max(k - f), np.max(f - (k - 1.0 / s.size)))


def test_sample_mu_frechet_matches_quadrature(rng):
    draws = priors.sample_mu_frechet(HF, rng, 100_000)
    assert np.all((draws >= HF.mu_inf) & (draws <= HF.x_e1))
    ks = _ks_to_density(draws, lambda x: np.nan_to_num(_pi_frechet_direct(np.minimum(x, 100 - 1e-12), HF)),
                        0.0, 100.0)
    assert ks < 0.01


def test_acceptance_rate_decreases_with_c(rng):
    lo = priors.sample_z_ar(5, HF.rho, rng, 20_000, c=0.01).acceptance
    hi = priors.sample_z_ar(5, HF.rho, rng, 20_000, c=1.0).acceptance
    assert lo > hi


def test_sample_mu_weibull_matches_quadrature(rng):
    h = WeibullHyper(5, 92.74, 128.44, 0.02)
    draws = priors.sample_mu_weibull(h, rng, 100_000)
    assert np.all((draws > h.x_e4) & (draws <= h.mu_sup))
    # mirrored closed form with z = (x_e4 - x_e3) / (mu - x_e3)
    a = h.x_e4 - h.x_e3

    def dens(x):
        x = np.maximum(x, h.x_e4 + 1e-9)
        return ((x - h.x_e3) / a * np.log((x - h.x_e3) / (x - h.x_e4))) ** (-h.m)

    assert _ks_to_density(draws, dens, h.x_e4, h.mu_sup, 400_001) < 0.01
    assert log_pi_mu_weibull(h.x_e4 - 1.0, h) == -np.inf
    assert log_pi_mu_weibull(h.mu_sup + 1.0, h) == -np.inf


def test_joint_prior_conditional_means(rng):
    # E[nu | mu, xi] = m / s1 and E[1/xi | mu] = m / s2, checked through the scaled products
    th = priors.sample_prior_frechet(HF, rng, 100_000)
    assert np.all((th["mu"] < HF.x_e1) & (th["xi"] > 0) & (th["nu"] > 0))
    assert np.mean(th["nu"] * s1(th["mu"], th["xi"], HF) / HF.m) == pytest.approx(1.0, rel=0.01)
    assert np.mean(s2(th["mu"], HF) / th["xi"] / HF.m) == pytest.approx(1.0, rel=0.01)
    h = WeibullHyper(5, 92.74, 128.44, 0.02)
    tw = priors.sample_prior_weibull(h, rng, 100_000)
    assert np.all((tw["mu"] > h.x_e4) & (tw["xi"] > 0) & (tw["nu"] >= 0))
    # tiny xi can push s3 past the float range (nu underflows to 0); selecting on (mu, xi) keeps the identity
    s = s3(tw["mu"], tw["xi"], h)
    fin = np.isfinite(s)
    assert fin.mean() > 0.95
    assert np.mean(tw["nu"][fin] * s[fin] / h.m) == pytest.approx(1.0, rel=0.01)
    assert np.mean(s4(tw["mu"], h) / tw["xi"] / h.m) == pytest.approx(1.0, rel=0.01)


def test_conditional_nu_mean_at_fixed_point(rng):
    mu, xi = 40.0, 0.8
    nu = rng.gamma(HF.m, size=100_000) / s1(mu, xi, HF)
    assert nu.mean() == pytest.approx((HF.x_e1 - mu) ** (1 / xi), rel=0.01)


# -- Gumbel ------------------------------------------------------------------


def test_gumbel_prior_hand_value():
    v = np.array([81.0, 93.0, 101.0])
    mu, sigma = 93.0, 10.0
    ref = -3 * np.log(sigma) + 3 * (mu - v.mean()) / sigma - np.sum(np.exp(-(v - mu) / sigma))
    assert log_gumbel_prior(mu, sigma, HG) == pytest.approx(ref, abs=1e-12)


def test_gumbel_prior_structure():
    shifted = GumbelHyper(tuple(np.array(HG.virtual_data) + 37.5))
    assert log_gumbel_prior(93.0 + 37.5, 12.0, shifted) == pytest.approx(log_gumbel_prior(93.0, 12.0, HG),
                                                                          abs=1e-12)
    big = np.array([1e6, 1e7])
    slope = np.diff(log_gumbel_prior(93.0, big, HG)) / np.diff(np.log(big))
    assert slope[0] == pytest.approx(-3.0, abs=1e-4)
    assert log_gumbel_prior(93.0, -1.0, HG) == -np.inf
    assert log_gumbel_prior(-1.0, 5.0, GumbelHyper(HG.virtual_data, 0.0)) == -np.inf


def test_gumbel_posterior_identities(rng):
    data = rng.gumbel(100.0, 40.0, 25)
    mus, sigmas = rng.uniform(50, 150, 20), rng.uniform(10, 80, 20)
    for mu, sigma in zip(mus, sigmas):
        assert log_gumbel_posterior(mu, sigma, HG, []) == pytest.approx(log_gumbel_prior(mu, sigma, HG), abs=1e-10)
        diff = log_gumbel_posterior(mu, sigma, HG, data) - log_gumbel_prior(mu, sigma, HG)
        assert diff == pytest.approx(loglik("gumbel", data, GumbelParams(mu, sigma)), abs=1e-10)
    # linear term is (m + n)(mu - pooled mean) / sigma
    y = np.concatenate([HG.values, data])
    pooled = (3 * HG.mean_virtual + data.sum()) / 28
    for mu, sigma in ((80.0, 30.0), (120.0, 55.0)):
        lin = (log_gumbel_posterior(mu, sigma, HG, data) + 28 * np.log(sigma)
               + np.sum(np.exp(-(y - mu) / sigma)))
        assert lin == pytest.approx(28 * (mu - pooled) / sigma, abs=1e-10)


def test_precision_marginal_matches_mu_integral():
    # integrating mu out numerically reproduces the closed-form density of w = 1/sigma
    w = np.array([0.01, 0.03, 0.06, 0.1, 0.2])
    num = []
    for wi in w:
        f = lambda mu: np.exp(log_gumbel_prior(mu, 1.0 / wi, HG)) / wi ** 2  # noqa: E731
        num.append(integrate.quad(f, -np.inf, np.inf, limit=400)[0])
    ratio = np.log(num) - priors.gumbel_precision_density(HG, w)
    np.testing.assert_allclose(ratio, ratio[0], atol=1e-7)


def test_exact_gumbel_sampler_matches_grid(rng):
    s = priors.sample_prior_gumbel_exact(HG, rng, 100_000)
    grid = priors.gumbel_precision_grid(HG, 20001)
    cum = np.cumsum(grid.weights)
    w_q = np.interp([0.25, 0.5, 0.75], cum, grid.w)
    np.testing.assert_allclose(np.quantile(1.0 / s.sigma, [0.25, 0.5, 0.75]), w_q, rtol=0.02)
    # mu | w is a log-gamma shift: E[exp(mu w) S(w)] = m
    ws = 1.0 / s.sigma
    S = np.exp(-np.outer(ws, HG.values)).sum(axis=1)
    assert np.mean(np.exp(s.mu * ws) * S) == pytest.approx(3.0, rel=0.01)


def test_truncated_gumbel_sampler(rng):
    h = GumbelHyper((82.0, 82.5, 126.5), 0.0)
    s = priors.sample_prior_gumbel_exact(h, rng, 50_000)
    assert np.all(s.mu >= 0.0)
    free = priors.sample_prior_gumbel_exact(GumbelHyper(h.virtual_data), np.random.default_rng(1), 200_000)
    kept = free.mu[free.mu >= 0]
    assert abs(np.median(s.mu) - np.median(kept)) < 1.0


def test_sir_weights_and_support(rng):
    r = priors.sample_prior_gumbel(HG, rng, n_proposals=20_000)
    assert r.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(r.weights >= 0) and np.all(r.sigma > 0) and np.all(r.mu > 0)
    assert 1.0 <= r.ess <= 20_000
    with pytest.raises(DomainError):
        priors.sample_prior_gumbel(HG, rng, alpha=-1.0)


@pytest.mark.xfail(strict=True, reason="the exponential/inverse-gamma importance law is far from the prior "
                                       "(ESS of a few units), and E[sigma] is infinite for m = 3")
def test_sir_sigma_mean_stable_across_seeds():
    means = [priors.sample_prior_gumbel(HG, np.random.default_rng(s), n_proposals=100_000).sigma.mean()
             for s in range(3)]
    assert max(means) / min(means) - 1 < 0.02


@settings(max_examples=40, deadline=None)
@given(mu=st.floats(-300, 99.0), m=st.sampled_from([1, 2, 5, 15]))
def test_pi_mu_bounded_by_one(mu, m):
    h = FrechetHyper(m, 100.0, 130.0, -300.0)
    assert log_pi_mu_frechet(mu, h) <= 1e-12
