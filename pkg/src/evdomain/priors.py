"""Virtual-data priors for the three sub-models.

Frechet and Weibull priors are hierarchical::

    nu | mu, xi  ~ Gamma(m, rate=s(mu, xi))
    xi | mu      ~ InvGamma(m, scale=t(mu))
    mu           ~ pi(mu), truncated to a finite interval

with ``s = s1, t = s2`` (Frechet) and ``s = s3, t = s4`` (Weibull).  The
Gumbel prior is conjugate and indexed by ``m >= 3`` virtual observations.

Gamma(a, b) has mean a/b; InvGamma(a, b) is the law of 1/Y for Y ~ Gamma(a, b).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import gammaincc, gammainccinv, gammaln, logsumexp, xlogy

from evdomain.evd_core import DomainError, FrechetParams, GumbelParams, WeibullParams

C_MIN = 0.01
MIN_AR_ACCEPTANCE = 0.05


class SamplingDiagnosticsError(RuntimeError):
    """Importance weights or acceptance rates are unusable."""


@dataclass(frozen=True)
class FrechetHyper:
    """Frechet prior: virtual size ``m`` and anchors ``mu_inf < x_e1 < x_e2``."""

    m: float
    x_e1: float
    x_e2: float
    mu_inf: float = 0.0

    def __post_init__(self):
        if not self.m > 0:
            raise DomainError("virtual size m must be positive")
        if not (self.mu_inf < self.x_e1 < self.x_e2):
            raise DomainError(f"need mu_inf < x_e1 < x_e2, got {self}")

    @property
    def rho(self) -> float:
        return (self.x_e2 - self.x_e1) / (self.x_e2 - self.mu_inf)

    @property
    def mu_bounds(self) -> tuple[float, float]:
        return (self.mu_inf, self.x_e1)


@dataclass(frozen=True)
class WeibullHyper:
    """Weibull prior: anchors ``x_e3 < x_e4`` and truncation ratio ``rho``.

    ``mu`` lives on ``(x_e4, mu_sup]`` with ``rho = (x_e4 - x_e3) / (mu_sup - x_e3)``.
    """

    m: float
    x_e3: float
    x_e4: float
    rho: float

    def __post_init__(self):
        if not self.m > 0:
            raise DomainError("virtual size m must be positive")
        if not self.x_e3 < self.x_e4:
            raise DomainError(f"need x_e3 < x_e4, got {self}")
        if not 0 < self.rho < 1:
            raise DomainError("rho must lie in (0, 1)")

    @property
    def mu_sup(self) -> float:
        return self.x_e3 + (self.x_e4 - self.x_e3) / self.rho

    @property
    def mu_bounds(self) -> tuple[float, float]:
        return (self.x_e4, self.mu_sup)


@dataclass(frozen=True)
class GumbelHyper:
    """Conjugate Gumbel prior indexed by strictly increasing virtual data.

    ``mu_inf`` optionally truncates the prior to ``mu >= mu_inf`` (None: no bound).
    """

    virtual_data: tuple
    mu_inf: Optional[float] = None

    def __post_init__(self):
        v = tuple(float(x) for x in self.virtual_data)
        object.__setattr__(self, "virtual_data", v)
        if len(v) < 3:
            raise DomainError("Gumbel prior is proper only for m >= 3 virtual points")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise DomainError("virtual data must be strictly increasing")

    @property
    def m(self) -> int:
        return len(self.virtual_data)

    @property
    def mean_virtual(self) -> float:
        return float(np.mean(self.virtual_data))

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.virtual_data)


# -- scale statistics ------------------------------------------------------


def _require(cond, msg):
    if not np.all(cond):
        raise DomainError(msg)


def s1(mu, xi, h: FrechetHyper):
    mu, xi = np.asarray(mu, float), np.asarray(xi, float)
    _require((mu < h.x_e1) & (xi > 0), "s1 needs mu < x_e1 and xi > 0")
    out = h.m * np.power(h.x_e1 - mu, -1.0 / xi)
    return float(out) if out.ndim == 0 else out


def s2(mu, h: FrechetHyper):
    mu = np.asarray(mu, float)
    _require(mu < h.x_e1, "s2 needs mu < x_e1")
    out = h.m * np.log((h.x_e2 - mu) / (h.x_e1 - mu))
    return float(out) if out.ndim == 0 else out


def s3(mu, xi, h: WeibullHyper):
    mu, xi = np.asarray(mu, float), np.asarray(xi, float)
    _require((mu > h.x_e4) & (xi > 0), "s3 needs mu > x_e4 and xi > 0")
    with np.errstate(over="ignore"):
        out = h.m * np.power(mu - h.x_e3, 1.0 / xi)
    return float(out) if out.ndim == 0 else out


def s4(mu, h: WeibullHyper):
    mu = np.asarray(mu, float)
    _require(mu > h.x_e4, "s4 needs mu > x_e4")
    out = h.m * np.log((mu - h.x_e3) / (mu - h.x_e4))
    return float(out) if out.ndim == 0 else out


# -- pi(mu) ----------------------------------------------------------------


def _z_frechet(mu, h: FrechetHyper):
    return (h.x_e2 - h.x_e1) / (h.x_e2 - mu)


def _z_weibull(mu, h: WeibullHyper):
    return (h.x_e4 - h.x_e3) / (mu - h.x_e3)


def _log_pi_z(z, m):
    # -m log(-log(1 - z) / z); equals 0 at z -> 0 and -inf at z = 1
    with np.errstate(divide="ignore", invalid="ignore"):
        return -m * np.log(-np.log1p(-z) / z)


def log_pi_mu_frechet(mu, h: FrechetHyper):
    """Unnormalized log pi(mu) on ``[mu_inf, x_e1]``.

    Scaled so that pi(mu) <= 1: the value is ``-m log((x_e2 - mu) s2(mu) / (m a))``
    with ``a = x_e2 - x_e1``.
    """
    mu = np.asarray(mu, float)
    inside = (mu >= h.mu_inf) & (mu < h.x_e1)
    z = _z_frechet(np.where(inside, mu, h.mu_inf), h)
    out = np.where(inside, _log_pi_z(z, h.m), -np.inf)
    return float(out) if out.ndim == 0 else out


def log_pi_mu_weibull(mu, h: WeibullHyper):
    """Unnormalized log pi(mu) on ``(x_e4, mu_sup]``, mirror image of the Frechet case."""
    mu = np.asarray(mu, float)
    inside = (mu > h.x_e4) & (mu <= h.mu_sup * (1 + 1e-12))
    z = _z_weibull(np.where(inside, mu, h.mu_sup), h)
    out = np.where(inside, _log_pi_z(z, h.m), -np.inf)
    return float(out) if out.ndim == 0 else out


def pi_mu_frechet_series(mu, h: FrechetHyper, rtol: float = 1e-14):
    """Series form ``(1 + sum_k z^k / (k + 1))^(-m)`` of pi(mu), ``z = a / (x_e2 - mu)``."""
    mu = np.asarray(mu, float)
    z = _z_frechet(mu, h)
    _require((z > 0) & (z < 1), "series needs mu < x_e1")
    total = np.ones_like(z)
    term = np.ones_like(z)
    k = 0
    while True:
        k += 1
        term = term * z
        inc = term / (k + 1)
        total = total + inc
        if np.all(inc <= rtol * total) or k > 100000:
            break
    out = total ** (-h.m)
    return float(out) if out.ndim == 0 else out


# -- acceptance-rejection sampling of pi(mu) -------------------------------


def _log_target_z(z, m):
    # pi~(z) = z^(m-2) / (-log(1-z))^m
    with np.errstate(divide="ignore"):
        return (m - 2) * np.log(z) - m * np.log(-np.log1p(-z))


def truncated_invgamma1_ppf(u, c: float, rho: float):
    """Inverse CDF of the InvGamma(1, c) law truncated to ``[rho, 1]``."""
    u = np.asarray(u, float)
    # log(e^(-c/rho) + u (e^(-c) - e^(-c/rho))), stable for small c
    return -c / (-c / rho + np.log1p(u * np.expm1(c / rho - c)))


def _ar_log_accept(z, m, rho, c):
    # log of Delta(c) (1 + rho/2)^m exp(-c/rho) pi~(z) / pi_instr(z)
    with np.errstate(divide="ignore"):
        return (m * (np.log1p(rho / 2) + np.log(z) - np.log(-np.log1p(-z)))
                + c / z - c / rho)


class ARResult(NamedTuple):
    z: np.ndarray
    acceptance: float


def sample_z_ar(m: float, rho: float, rng: np.random.Generator, size: int,
                c: float = C_MIN) -> ARResult:
    """Draw ``z`` on ``[rho, 1]`` from pi~(z) by acceptance-rejection."""
    if not c > 0:
        raise DomainError("instrumental parameter c must be positive")
    out = np.empty(size)
    filled = tried = accepted = 0
    batch = max(1024, 2 * size)
    while filled < size:
        z = truncated_invgamma1_ppf(rng.random(batch), c, rho)
        keep = np.log(rng.random(batch)) <= _ar_log_accept(z, m, rho, c)
        tried += batch
        accepted += int(keep.sum())
        acc = z[keep][: size - filled]
        out[filled:filled + acc.size] = acc
        filled += acc.size
        if tried >= 4096 and accepted / tried < MIN_AR_ACCEPTANCE and filled < size:
            raise SamplingDiagnosticsError(
                f"acceptance rate {accepted / tried:.3g} below {MIN_AR_ACCEPTANCE}")
        rate = max(keep.mean(), 1e-3)
        batch = int(min(max(1024, 1.2 * (size - filled) / rate), 4_000_000))
    return ARResult(out, accepted / tried)


def sample_z_grid(m: float, rho: float, rng: np.random.Generator, size: int,
                  n_grid: int = 200_001) -> np.ndarray:
    """Fallback sampler: inverse CDF of pi~(z) tabulated on a log grid."""
    lz = np.linspace(np.log(rho), 0.0, n_grid)
    z = np.exp(lz)
    logd = _log_target_z(z, m) + lz  # density with respect to log z
    d = np.exp(logd - np.max(logd[np.isfinite(logd)]))
    d[~np.isfinite(d)] = 0.0
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (d[1:] + d[:-1]) * np.diff(lz))])
    cum /= cum[-1]
    return np.exp(np.interp(rng.random(size), cum, lz))


def sample_z(m, rho, rng, size, c=C_MIN) -> np.ndarray:
    try:
        return sample_z_ar(m, rho, rng, size, c).z
    except SamplingDiagnosticsError:
        return sample_z_grid(m, rho, rng, size)


def sample_mu_frechet(h: FrechetHyper, rng: np.random.Generator, size=None, c: float = C_MIN):
    """Exact draws of mu from the truncated Frechet pi(mu)."""
    n = 1 if size is None else int(size)
    z = sample_z(h.m, h.rho, rng, n, c)
    mu = np.maximum(h.x_e2 - (h.x_e2 - h.x_e1) / z, h.mu_inf)
    return float(mu[0]) if size is None else mu


def weibull_envelope_c(rho: float) -> float:
    """Instrumental constant for the Weibull z-sampler.

    The envelope bound decreases with c; Weibull truncation ratios are far
    smaller than Frechet ones, so c is tied to rho to keep ``c / rho`` small.
    """
    return min(C_MIN, 0.1 * rho)


def sample_mu_weibull(h: WeibullHyper, rng: np.random.Generator, size=None, c: Optional[float] = None):
    n = 1 if size is None else int(size)
    z = sample_z(h.m, h.rho, rng, n, weibull_envelope_c(h.rho) if c is None else c)
    mu = np.minimum(h.x_e3 + (h.x_e4 - h.x_e3) / z, h.mu_sup)
    return float(mu[0]) if size is None else mu


def sample_prior_frechet(h: FrechetHyper, rng: np.random.Generator, size=None):
    """Joint prior draw; a FrechetParams when ``size`` is None, else a dict of arrays (with ``log_nu``)."""
    n = 1 if size is None else int(size)
    mu = sample_mu_frechet(h, rng, n)
    xi = s2(mu, h) / rng.gamma(h.m, size=n)
    # log nu = log Gamma(m, 1) - log s1, kept in logs since s1 leaves the float range for small xi
    log_nu = np.log(rng.gamma(h.m, size=n)) - np.log(h.m) + np.log(h.x_e1 - mu) / xi
    nu = np.exp(log_nu)
    if size is None:
        return FrechetParams(float(mu[0]), float(nu[0]), float(xi[0]))
    return {"mu": mu, "nu": nu, "xi": xi, "log_nu": log_nu}


def sample_prior_weibull(h: WeibullHyper, rng: np.random.Generator, size=None):
    n = 1 if size is None else int(size)
    mu = sample_mu_weibull(h, rng, n)
    xi = s4(mu, h) / rng.gamma(h.m, size=n)
    log_nu = np.log(rng.gamma(h.m, size=n)) - np.log(h.m) - np.log(mu - h.x_e3) / xi
    nu = np.exp(log_nu)
    if size is None:
        return WeibullParams(float(mu[0]), float(nu[0]), float(xi[0]))
    return {"mu": mu, "nu": nu, "xi": xi, "log_nu": log_nu}


# -- joint log priors ------------------------------------------------------


def log_gamma_pdf(x, shape, log_rate):
    return shape * log_rate - gammaln(shape) + (shape - 1) * np.log(x) - np.exp(log_rate) * x


def log_invgamma_pdf(x, shape, scale):
    return shape * np.log(scale) - gammaln(shape) - (shape + 1) * np.log(x) - scale / x


def log_prior_frechet(p: FrechetParams, h: FrechetHyper) -> float:
    """Joint log prior up to the (unknown) normalizing constant of pi(mu)."""
    if not (h.mu_inf <= p.mu < h.x_e1 and p.nu > 0 and p.xi > 0):
        return -np.inf
    log_s1 = np.log(h.m) - np.log(h.x_e1 - p.mu) / p.xi
    return float(log_pi_mu_frechet(p.mu, h)
                 + log_invgamma_pdf(p.xi, h.m, s2(p.mu, h))
                 + log_gamma_pdf(p.nu, h.m, log_s1))


def log_prior_weibull(p: WeibullParams, h: WeibullHyper) -> float:
    lo, hi = h.mu_bounds
    if not (lo < p.mu <= hi and p.nu > 0 and p.xi > 0):
        return -np.inf
    log_s3 = np.log(h.m) + np.log(p.mu - h.x_e3) / p.xi
    return float(log_pi_mu_weibull(p.mu, h)
                 + log_invgamma_pdf(p.xi, h.m, s4(p.mu, h))
                 + log_gamma_pdf(p.nu, h.m, log_s3))


# -- Gumbel ---------------------------------------------------------------


def _above(mu, h: GumbelHyper):
    return np.ones(np.shape(mu), bool) if h.mu_inf is None else mu >= h.mu_inf


def log_gumbel_prior(mu, sigma, h: GumbelHyper):
    """``-m log sigma + m (mu - xbar) / sigma - sum_i exp(-(x~_i - mu) / sigma)``."""
    mu, sigma = np.asarray(mu, float), np.asarray(sigma, float)
    v = h.values.reshape((-1,) + (1,) * np.broadcast(mu, sigma).ndim)
    ok = (sigma > 0) & _above(mu, h)
    s = np.where(ok, sigma, 1.0)
    with np.errstate(over="ignore"):
        val = (-h.m * np.log(s) + h.m * (mu - h.mean_virtual) / s
               - np.sum(np.exp(-(v - mu) / s), axis=0))
    out = np.where(ok, val, -np.inf)
    return float(out) if out.ndim == 0 else out


def log_gumbel_posterior(mu, sigma, h: GumbelHyper, data):
    """Conjugate posterior kernel, written with the pooled (virtual + real) mean."""
    data = np.asarray(data, float).ravel()
    mu, sigma = np.asarray(mu, float), np.asarray(sigma, float)
    m, n = h.m, data.size
    pooled = (m * h.mean_virtual + n * (data.mean() if n else 0.0)) / (m + n)
    y = np.concatenate([h.values, data]).reshape((-1,) + (1,) * np.broadcast(mu, sigma).ndim)
    ok = (sigma > 0) & _above(mu, h)
    s = np.where(ok, sigma, 1.0)
    with np.errstate(over="ignore"):
        val = (-(m + n) * np.log(s) + (m + n) * (mu - pooled) / s
               - np.sum(np.exp(-(y - mu) / s), axis=0))
    out = np.where(ok, val, -np.inf)
    return float(out) if out.ndim == 0 else out


def gumbel_precision_density(h: GumbelHyper, w):
    """Unnormalized log marginal prior density of ``w = 1 / sigma`` (no truncation).

    Integrating mu out of the conjugate prior (``u = exp(mu / sigma)`` is
    Gamma(m, S) with ``S = sum_i exp(-x~_i / sigma)``) leaves
    ``w^(m-3) (sum_i exp(-(x~_i - xbar) w))^(-m)``.
    """
    w = np.asarray(w, float)
    d = (h.values - h.mean_virtual)[:, None]
    with np.errstate(divide="ignore"):
        return xlogy(h.m - 3, w) - h.m * logsumexp(-d * w.ravel()[None, :], axis=0).reshape(w.shape)


class PrecisionGrid(NamedTuple):
    w: np.ndarray          # nodes for 1 / sigma
    weights: np.ndarray    # normalized quadrature weights of the marginal prior
    log_s: np.ndarray      # log S(w) = log sum_i exp(-x~_i w)
    mass: np.ndarray       # P(mu >= mu_inf | w) before truncation


def _upper_gamma(m, log_arg):
    with np.errstate(over="ignore"):
        return gammaincc(m, np.exp(log_arg))


def gumbel_precision_grid(h: GumbelHyper, n: int = 4001, decay: float = 60.0) -> PrecisionGrid:
    """Quadrature nodes and weights for integrals against the prior of ``w = 1 / sigma``.

    With a lower bound on mu, ``mu >= mu_inf`` iff ``u >= exp(mu_inf w)``,
    which multiplies the untruncated density by an upper incomplete gamma.
    """
    spread = h.mean_virtual - h.values[0]
    w = np.linspace(0.0, decay / (h.m * spread), n)
    logd = gumbel_precision_density(h, w)
    log_s = logsumexp(-np.outer(w, h.values), axis=1)
    if h.mu_inf is None:
        mass = np.ones(n)
    else:
        mass = _upper_gamma(h.m, log_s + h.mu_inf * w)
    d = np.exp(logd - np.max(logd)) * mass
    tw = np.full(n, w[1] - w[0])
    tw[[0, -1]] *= 0.5
    weights = d * tw
    return PrecisionGrid(w, weights / weights.sum(), log_s, mass)


def gumbel_conditional_cdf(x, grid: PrecisionGrid, h: GumbelHyper) -> np.ndarray:
    """``P(X <= x | w)`` at every node, after integrating mu out exactly."""
    w = grid.w
    log_c = -x * w
    # E[exp(-u c)] over u ~ Gamma(m, S) is (1 + c / S)^(-m)
    val = np.exp(-h.m * np.logaddexp(0.0, log_c - grid.log_s))
    if h.mu_inf is not None:
        # restrict to u >= exp(mu_inf w): tilted law is Gamma(m, S + c)
        tail = _upper_gamma(h.m, np.logaddexp(grid.log_s, log_c) + h.mu_inf * w)
        with np.errstate(invalid="ignore", divide="ignore"):
            val = np.where(grid.mass > 0, val * tail / grid.mass, 0.0)
    return val


class GumbelPriorSample(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray


def sample_prior_gumbel_exact(h: GumbelHyper, rng: np.random.Generator, size: int,
                              n_grid: int = 20001) -> GumbelPriorSample:
    """Exact prior draws: w = 1/sigma by grid inversion, then mu | sigma in closed form."""
    grid = gumbel_precision_grid(h, n_grid)
    wts = grid.weights
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (wts[1:] + wts[:-1]))])
    cum /= cum[-1]
    wd = np.interp(rng.random(size), cum, grid.w)
    wd = np.maximum(wd, np.finfo(float).tiny)
    sigma = 1.0 / wd
    log_s = logsumexp(-np.outer(wd, h.values), axis=1)
    # exp(mu / sigma) * S ~ Gamma(m, 1), truncated below when mu is bounded
    if h.mu_inf is None:
        t = rng.gamma(h.m, size=size)
    else:
        q0 = _upper_gamma(h.m, log_s + h.mu_inf * wd)
        t = gammainccinv(h.m, (1.0 - rng.random(size)) * q0)
    mu = sigma * (np.log(t) - log_s)
    if h.mu_inf is not None:
        mu = np.maximum(mu, h.mu_inf)
    return GumbelPriorSample(mu, sigma)


class SIRResult(NamedTuple):
    mu: np.ndarray          # resampled draws
    sigma: np.ndarray
    proposals_mu: np.ndarray
    proposals_sigma: np.ndarray
    weights: np.ndarray     # normalized, sum to one
    ess: float


def sample_prior_gumbel(h: GumbelHyper, rng: np.random.Generator, alpha: float = 100.0,
                        n_proposals: int = 100_000, size: Optional[int] = None) -> SIRResult:
    """Sampling importance resampling with mu ~ Exp(mean alpha), sigma ~ InvGamma(m-1, m xbar).

    The exponential instrumental law only covers ``mu > 0``.
    """
    if not alpha > 0 or int(n_proposals) < 1:
        raise DomainError("need alpha > 0 and at least one proposal")
    if not h.mean_virtual > 0:
        raise DomainError("the SIR instrumental law needs a positive virtual mean")
    m = h.m
    n_proposals = int(n_proposals)
    mu = rng.exponential(alpha, n_proposals)
    sigma = m * h.mean_virtual / rng.gamma(m - 1, size=n_proposals)
    with np.errstate(over="ignore"):
        logw = mu * (m / sigma + 1.0 / alpha) - np.exp(
            -(h.values[:, None] - mu[None, :]) / sigma[None, :]).sum(axis=0)
    finite = np.isfinite(logw)
    if h.mu_inf is not None:
        finite &= mu >= h.mu_inf
    if not finite.any():
        raise SamplingDiagnosticsError("all SIR weights vanish")
    logw = np.where(finite, logw, -np.inf)
    w = np.exp(logw - logw.max())
    total = w.sum()
    if not total > 0:
        raise SamplingDiagnosticsError("all SIR weights vanish")
    w /= total
    ess = 1.0 / np.sum(w ** 2)
    k = n_proposals if size is None else int(size)
    idx = rng.choice(n_proposals, size=k, replace=True, p=w)
    return SIRResult(mu[idx], sigma[idx], mu, sigma, w, float(ess))


def gumbel_prior_params(sample: GumbelPriorSample, i: int) -> GumbelParams:
    return GumbelParams(float(sample.mu[i]), float(sample.sigma[i]))
