"""Exit criteria, one PASS/FAIL line each.

Run alone with ``pytest -m acceptance -s``.  The Corsica pipeline run is
shared by the compatibility, recovery and end-to-end checks.
"""

import time

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import gammaln, logsumexp

from evdomain import (FrechetParams, GumbelParams, Model, WeibullParams, cdf, loglik, logpdf, quantile,
                      sample)
from evdomain import priors
from evdomain.calibration import (CORSICA_EXPERT, ISConfig, calibrate_frechet, calibrate_gumbel_virtual,
                                  calibrate_virtual_size, calibrate_weibull, gumbel_prior_predictive_cdf)
from evdomain.inference import (MCMCSettings, MixtureConfig, conditional_nu_posterior, mixture_posterior_mcmc,
                                model_posterior_probs, model_posterior_se)
from evdomain.pipeline import RunConfig, emit_report, load_fixture, report_body, run_pipeline
from evdomain.priors import FrechetHyper, GumbelHyper, WeibullHyper

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

IS_1E5 = ISConfig(n_draws=100_000)


def _fmt(v):
    return "(" + ", ".join(f"{x:.2f}" for x in v) + ")"


def _orders(v):
    return "(" + ", ".join(f"{100 * x:.1f}" for x in v) + ")%"


def _ks_to_density(draws, density, lo, hi, n=400_001):
    x = np.linspace(lo, hi, n)
    cum = integrate.cumulative_trapezoid(density(x), x, initial=0.0)
    cum /= cum[-1]
    s = np.sort(draws)
    f = np.interp(s, x, cum)
    k = np.arange(1, s.size + 1) / s.size
    return max(np.max(k - f), np.max(f - (k - 1.0 / s.size)))


@pytest.fixture(scope="module")
def corsica(tmp_path_factory):
    cfg, data = RunConfig(), load_fixture()
    runs = []
    for k in range(2):
        out = tmp_path_factory.mktemp(f"corsica{k}")
        t0 = time.perf_counter()
        state = run_pipeline(cfg, data, out)
        emit_report(state.report, "json", out / "report.json", state.draws)
        runs.append((state, out, time.perf_counter() - t0))
    return cfg, data, runs


# -- 1. closed forms -------------------------------------------------------------


def test_c1_closed_forms(verdict):
    params = {Model.FRECHET: FrechetParams(10.0, 2.0, 0.7), Model.WEIBULL: WeibullParams(200.0, 0.3, 0.5),
              Model.GUMBEL: GumbelParams(100.0, 40.0)}
    t0 = time.perf_counter()
    rt, fd = 0.0, 0.0
    q = np.linspace(0.01, 0.99, 99)
    for model, p in params.items():
        x = quantile(model, p, q)
        rt = max(rt, np.max(np.abs(cdf(model, x, p) - q)))
        h = 1e-6 * (x[-1] - x[0])
        d = (cdf(model, x + h, p) - cdf(model, x - h, p)) / (2 * h)
        fd = max(fd, np.max(np.abs(np.exp(logpdf(model, x, p)) / d - 1.0)))
    dt = time.perf_counter() - t0
    verdict("C1 closed forms: round trip <= 1e-12, FD density <= 1e-6, < 1 s",
            rt <= 1e-12 and fd <= 1e-6 and dt < 1.0, f"round trip {rt:.1e}, FD rel {fd:.1e}, {dt:.3f} s")


# -- 2. conjugacy ------------------------------------------------------------------


def test_c2_conjugacy(verdict):
    rng = np.random.default_rng(2)
    data = load_fixture().values
    hf, hw = FrechetHyper(5, 88.0, 131.5, 0.0), WeibullHyper(5, 91.5, 131.0, 0.01)
    worst = 0.0
    t0 = time.perf_counter()
    for model, h, cls in (("frechet", hf, FrechetParams), ("weibull", hw, WeibullParams)):
        for _ in range(20):
            x = data[rng.permutation(data.size)[: rng.integers(5, data.size + 1)]]
            if model == "frechet":
                mu = rng.uniform(-50, min(h.x_e1, x.min()) - 1)
            else:
                mu = rng.uniform(x.max() + 1, x.max() + 300)
            xi = rng.uniform(0.1, 2.0)
            s = priors.s1(mu, xi, h) if model == "frechet" else priors.s3(mu, xi, h)
            shape, rate = conditional_nu_posterior(model, mu, xi, h, x)
            nu = np.geomspace(shape / rate * 1e-2, shape / rate * 1e2, 100)
            joint = stats.gamma.logpdf(nu, h.m, scale=1 / s) + np.array([loglik(model, x, cls(mu, v, xi)) for v in nu])
            worst = max(worst, np.ptp(joint - stats.gamma.logpdf(nu, shape, scale=1 / rate)))
    dt = time.perf_counter() - t0
    verdict("C2 nu-conditional density ratio constant within 1e-8", worst < 1e-8,
            f"max spread {worst:.1e} over 2 x 20 configs, {dt:.1f} s")


# -- 3. pi(mu) samplers --------------------------------------------------------------


def test_c3_mu_samplers(verdict):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    rows = []
    for m in (1, 5, 15):
        for mu_inf in (0.0, -100.0):
            h = FrechetHyper(m, 100.0, 130.0, mu_inf)

            def dens(x, h=h):
                x = np.minimum(x, h.x_e1 - 1e-9)
                return ((h.x_e2 - x) / (h.x_e2 - h.x_e1) * np.log((h.x_e2 - x) / (h.x_e1 - x))) ** (-h.m)

            d = priors.sample_mu_frechet(h, rng, 100_000)
            rows.append((f"F m={m} mu_inf={mu_inf:g}", _ks_to_density(d, dens, mu_inf, h.x_e1)))
        h = WeibullHyper(m, 100.0, 130.0, 0.02)

        def wdens(x, h=h):
            x = np.maximum(x, h.x_e4 + 1e-9)
            return ((x - h.x_e3) / (h.x_e4 - h.x_e3) * np.log((x - h.x_e3) / (x - h.x_e4))) ** (-h.m)

        d = priors.sample_mu_weibull(h, rng, 100_000)
        rows.append((f"W m={m}", _ks_to_density(d, wdens, h.x_e4, h.mu_sup)))
    dt = time.perf_counter() - t0
    worst = max(k for _, k in rows)
    verdict("C3 pi(mu) samplers: Kolmogorov distance < 0.01, < 1 min", worst < 0.01 and dt < 60,
            ", ".join(f"{n}: {k:.4f}" for n, k in rows) + f"; {dt:.1f} s")


# -- 4. prior calibration against the tables -----------------------------------------------


@pytest.mark.parametrize("m,published", [(1, (100.41, 130.20)), (5, (87.72, 133.95))])
def test_c4_frechet_anchors(m, published, verdict):
    r = calibrate_frechet(m, CORSICA_EXPERT, mu_inf=0.0, is_cfg=IS_1E5, rng=40 + m)
    got = (r.hyper.x_e1, r.hyper.x_e2)
    verdict(f"C4 Frechet m={m} anchors within 2 of {_fmt(published)}",
            max(abs(a - b) for a, b in zip(got, published)) <= 2.0, f"got {_fmt(got)}")


@pytest.mark.parametrize("m", [1, 5])
def test_c4_frechet_orders(m, verdict):
    r = calibrate_frechet(m, CORSICA_EXPERT, mu_inf=0.0, is_cfg=IS_1E5, rng=40 + m)
    gap = max(abs(a - b) for a, b in zip(r.achieved_orders, CORSICA_EXPERT.orders))
    verdict(f"C4 Frechet m={m} orders within 2 points of (25, 50, 75)", gap <= 0.02,
            f"got {_orders(r.achieved_orders)}")


def test_c4_weibull_m5(verdict):
    r = calibrate_weibull(5, CORSICA_EXPERT, is_cfg=IS_1E5, rng=45)
    got = (r.hyper.x_e3, r.hyper.x_e4)
    published = (92.74, 128.44)
    gap = max(abs(a - b) for a, b in zip(r.achieved_orders, CORSICA_EXPERT.orders))
    try:
        verdict("C4 Weibull m=5 orders within 4 points of (25, 50, 75)", gap <= 0.04,
                f"got {_orders(r.achieved_orders)}")
    finally:
        verdict(f"C4 Weibull m=5 anchors within 2 of {_fmt(published)}",
                max(abs(a - b) for a, b in zip(got, published)) <= 2.0, f"got {_fmt(got)}, rho {r.hyper.rho:.2g}")


# -- 5. Gumbel virtual data --------------------------------------------------------------


def test_c5_gumbel_search(verdict):
    cfg = RunConfig()
    r = calibrate_gumbel_virtual(cfg.expert, cfg.gumbel_grid, cfg.gumbel_m, cfg.gumbel_nodes, cfg.mu_inf)
    v = r.hyper.virtual_data
    gap = max(abs(a - b) for a, b in zip(r.achieved_orders, CORSICA_EXPERT.orders))
    try:
        verdict("C5 Gumbel search: ordered triple reproducing expert orders within 1.5 points",
                all(b > a for a, b in zip(v, v[1:])) and gap <= 0.015,
                f"{_fmt(v)}, orders {_orders(r.achieved_orders)}")
    finally:
        verdict("C5 Gumbel search: triple within 2 of (81, 93, 101)",
                max(abs(a - b) for a, b in zip(v, (81.0, 93.0, 101.0))) <= 2.0, f"got {_fmt(v)}")


def test_c5_naive_triple(verdict):
    got = gumbel_prior_predictive_cdf(CORSICA_EXPERT.values, GumbelHyper(CORSICA_EXPERT.values, 0.0))
    verdict("C5 naive triple (75, 100, 150) gives about (26, 40, 63)% within 2 points",
            max(abs(a - b) for a, b in zip(got, (0.26, 0.40, 0.63))) <= 0.02, f"got {_orders(got)}")


# -- 6. virtual-size compatibility ---------------------------------------------------------


@pytest.mark.parametrize("model", ["frechet", "weibull"])
def test_c6_compatibility(model, corsica, verdict):
    cfg, _, runs = corsica
    state = runs[0][0]
    picks = []
    for seed in (61, 62, 63):
        c = calibrate_virtual_size(model, state.gumbel.hyper, state.shape[model], seed, cfg.compat_draws,
                                   cfg.compat_bins, cfg.tie_band)
        picks.append(c.m_star)
    verdict(f"C6 {model} m* in {{4, 5, 6}} and stable over 3 seeds",
            len(set(picks)) == 1 and picks[0] in (4, 5, 6), f"m* = {picks}")


# -- 7. mixture selection ------------------------------------------------------------------


def _log_gumbel_normalizer(y):
    """log of the integral of the conjugate Gumbel kernel over (mu, sigma), mu integrated in closed form."""
    y = np.asarray(y, float)
    n, d = y.size, y - y.mean()

    def f(w):
        return (n - 3) * np.log(w) - n * logsumexp(-d * w)

    fm = max(f(w) for w in np.geomspace(1e-5, 10.0, 2000))
    val, _ = integrate.quad(lambda w: np.exp(f(w) - fm), 0, np.inf, limit=500, epsabs=0, epsrel=1e-10)
    return gammaln(n) + fm + np.log(val)


def test_c7a_bma_equivalence(verdict):
    # two conjugate Gumbel priors: exact marginal likelihoods are one-dimensional integrals
    x = sample("gumbel", GumbelParams(100.0, 25.0), np.random.default_rng(1), 8)
    ha = GumbelHyper((70.0, 85.0, 95.0, 110.0, 140.0))
    hb = GumbelHyper((60.0, 75.0, 85.0, 95.0, 115.0))
    log_bf = (_log_gumbel_normalizer(np.r_[ha.values, x]) - _log_gumbel_normalizer(ha.values)
              - _log_gumbel_normalizer(np.r_[hb.values, x]) + _log_gumbel_normalizer(hb.values))
    exact = 1.0 / (1.0 + np.exp(-log_bf))
    d = mixture_posterior_mcmc(x, [ha, hb], MixtureConfig((0.5, 0.5)),
                               MCMCSettings(n_chains=4, n_iter=12_000, burn_in=2000), rng=3, labels=["a", "b"])
    p, se = model_posterior_probs(d)[0], model_posterior_se(d)[0]
    verdict("C7a mixture estimate matches quadrature posterior probability within 3 MC SE",
            abs(p - exact) <= 3 * se, f"mixture {p:.4f} +/- {se:.4f}, quadrature {exact:.4f}")


SYNTHETIC = {
    "gumbel": GumbelParams(100.0, 40.0),
    "frechet": FrechetParams(0.0, 1.0, 0.5),
    "weibull": WeibullParams(200.0, 50.0 ** -2, 0.5),
}


def test_c7b_synthetic_recovery(corsica, verdict):
    hypers = corsica[2][0][0].hypers()
    t0 = time.perf_counter()
    rows, ok = [], True
    for truth, p in SYNTHETIC.items():
        for seed in (1, 2, 3):
            x = sample(truth, p, np.random.default_rng(700 + seed), 500)
            d = mixture_posterior_mcmc(x, hypers, settings=MCMCSettings(n_chains=2, n_iter=4000, burn_in=1000),
                                       rng=seed, labels=["frechet", "weibull", "gumbel"])
            probs = model_posterior_probs(d)
            win = ("frechet", "weibull", "gumbel")[int(np.argmax(probs))]
            ok &= win == truth
            rows.append(f"{truth}/{seed}: P={probs[('frechet', 'weibull', 'gumbel').index(truth)]:.3f}")
    dt = time.perf_counter() - t0
    verdict("C7b n=500 synthetic data selects the true domain in 3/3 seeds, < 10 min", ok and dt < 600,
            ", ".join(rows) + f"; {dt:.0f} s")


# -- 8. Corsica end to end ------------------------------------------------------------------


def test_c8_corsica(corsica, verdict):
    _, _, runs = corsica
    (s1, o1, t1), (s2, o2, t2) = runs
    total = sum(s1.report.model_probs.values())
    rhat = s1.report.diagnostics["max_rhat"]
    same = report_body(o1 / "report.json") == report_body(o2 / "report.json") and all(
        (o1 / f).read_bytes() == (o2 / f).read_bytes() for f in ("draws.csv", "weights.csv", "predictive.csv"))
    ok = s1.failure is None and abs(total - 1.0) <= 1e-12 and rhat < 1.1 and same and max(t1, t2) < 300
    probs = ", ".join(f"{k} {v:.3f}" for k, v in s1.report.model_probs.items())
    verdict("C8 Corsica run: probabilities sum to 1, R-hat < 1.1, byte-identical rerun, < 5 min", ok,
            f"{probs}; sum-1 {total - 1:.1e}; max R-hat {rhat:.4f}; identical {same}; {t1:.0f} s / {t2:.0f} s")
