"""Posterior model probabilities through the encompassing mixture.

The three sub-models share no parameters, so the concatenated vector
``theta = (theta_F, theta_W, theta_G)`` is given the product of the block
priors and the likelihood ``sum_M pi_M p_M(x | theta_M)``.  Along a chain
targeting that posterior, ``W_M = pi_M p_M(x | theta_M) / p(x | theta)``
averages to ``P(M | x)``.

Sampler, per block and per sweep:

* Frechet and Weibull: nu is integrated out in closed form, (mu, xi) move by
  random-walk, prior-independence and Laplace-independence Metropolis steps,
  then nu is drawn exactly from its two-component gamma conditional.
* Gumbel: the same three Metropolis moves on (mu, log sigma).

Chains run in lockstep as arrays, each with its own random stream.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import optimize
from scipy.special import expit, gammaln, log_expit, logit, logsumexp
from scipy.stats import norm, rankdata

from evdomain import priors
from evdomain.calibration import ConfigurationError
from evdomain.evd_core import (XI_MAX, XI_MIN, DomainError, FrechetParams, GumbelParams, Model,
                               WeibullParams)
from evdomain.priors import FrechetHyper, GumbelHyper, SamplingDiagnosticsError, WeibullHyper

log = logging.getLogger(__name__)

Hyper = Union[FrechetHyper, WeibullHyper, GumbelHyper]


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class MixtureConfig:
    """Prior model weights, in block order."""

    prior_weights: tuple = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        w = np.asarray(self.prior_weights, float)
        if w.ndim != 1 or w.size < 1 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigurationError("prior weights must be nonnegative and sum to 1")
        object.__setattr__(self, "prior_weights", tuple(float(v) for v in w))

    @property
    def log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(np.asarray(self.prior_weights))


@dataclass(frozen=True)
class MCMCSettings:
    n_chains: int = 4
    n_iter: int = 50_000
    burn_in: int = 10_000
    thin: int = 1
    target_accept: float = 0.3
    laplace_df: float = 4.0
    chunk: int = 1000
    rhat_threshold: float = 1.1

    def __post_init__(self):
        if self.n_chains < 1 or self.thin < 1 or self.burn_in < 0 or self.chunk < 1:
            raise ConfigurationError(f"invalid MCMC settings {self}")
        if self.n_retained < 1:
            raise ConfigurationError("no draws left after burn-in and thinning")

    @property
    def n_retained(self) -> int:
        return max(self.n_iter - self.burn_in, 0) // self.thin


# -- per-model likelihood pieces ---------------------------------------------


def _lse(a, axis):
    """log-sum-exp along ``axis``; a lean stand-in for scipy's on small hot-loop arrays."""
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def _model_of_hyper(h) -> Model:
    if isinstance(h, FrechetHyper):
        return Model.FRECHET
    if isinstance(h, WeibullHyper):
        return Model.WEIBULL
    if isinstance(h, GumbelHyper):
        return Model.GUMBEL
    raise DomainError(f"not a hyperparameter set: {h!r}")


def _data(data) -> np.ndarray:
    x = np.asarray(data, float).ravel()
    if not np.all(np.isfinite(x)):
        raise DomainError("data must be finite")
    return x


def _shape_terms(model: Model, h, mu, xi, x):
    """Shared pieces for Frechet/Weibull: ``(ok, a, log t, log s_nu)``.

    ``t = x - mu`` (Frechet) or ``mu - x`` (Weibull), ``a = -1/xi`` or ``1/xi``,
    ``s_nu`` is s1 or s3.
    """
    mu = np.asarray(mu, float)
    xi = np.asarray(xi, float)
    if model is Model.FRECHET:
        t = x[None, :] - mu[:, None]
        d = h.x_e1 - mu
        a = -1.0 / xi
    else:
        t = mu[:, None] - x[None, :]
        d = mu - h.x_e3
        a = 1.0 / xi
    ok = np.all(t > 0, axis=1) & (xi > XI_MIN) & (xi < XI_MAX) & (d > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        lt = np.log(np.where(t > 0, t, 1.0))
        log_s = np.log(h.m) + a * np.log(np.where(d > 0, d, 1.0))
    return ok, a, lt, log_s


def collapsed_loglik(model, h, mu, xi, data) -> np.ndarray:
    """``log int p(x | mu, nu, xi) Gamma(nu; m, s) dnu`` for Frechet or Weibull, vectorized in (mu, xi)."""
    model = Model.parse(model)
    x = _data(data)
    mu, xi = np.atleast_1d(np.asarray(mu, float)), np.atleast_1d(np.asarray(xi, float))
    n, m = x.size, h.m
    ok, a, lt, log_s = _shape_terms(model, h, mu, xi, x)
    if n == 0:
        return np.where(ok, 0.0, -np.inf)
    with np.errstate(over="ignore", invalid="ignore"):
        log_rate = np.logaddexp(log_s, _lse(a[:, None] * lt, axis=1))
        val = (-n * np.log(xi) + (a - 1.0) * lt.sum(axis=1) + gammaln(m + n) - gammaln(m)
               + m * log_s - (m + n) * log_rate)
    return np.where(ok & np.isfinite(val), val, -np.inf)


def _loglik_shape(model, mu, nu, xi, x):
    t = x[None, :] - mu[:, None] if model is Model.FRECHET else mu[:, None] - x[None, :]
    a = -1.0 / xi if model is Model.FRECHET else 1.0 / xi
    ok = np.all(t > 0, axis=1) & (xi > XI_MIN) & (xi < XI_MAX) & (nu > 0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        lt = np.log(np.where(t > 0, t, 1.0))
        val = (x.size * (np.log(nu) - np.log(xi)) + (a - 1.0) * lt.sum(axis=1)
               - nu * np.exp(a[:, None] * lt).sum(axis=1))
    return np.where(ok & ~np.isnan(val), val, -np.inf)


def _loglik_gumbel(mu, sigma, x):
    z = (x[None, :] - mu[:, None]) / sigma[:, None]
    with np.errstate(over="ignore"):
        val = -x.size * np.log(sigma) - z.sum(axis=1) - np.exp(-z).sum(axis=1)
    return np.where(sigma > 0, val, -np.inf)


def block_loglik(model, params: dict, data) -> np.ndarray:
    """Vectorized log-likelihood; ``params`` maps names to equal-length arrays."""
    model = Model.parse(model)
    x = _data(data)
    if model is Model.GUMBEL:
        mu, sigma = np.atleast_1d(params["mu"]).astype(float), np.atleast_1d(params["sigma"]).astype(float)
        return _loglik_gumbel(mu, sigma, x)
    mu, nu, xi = (np.atleast_1d(params[k]).astype(float) for k in ("mu", "nu", "xi"))
    return _loglik_shape(model, mu, nu, xi, x)


def mixture_loglik(data, state: "MixtureState", cfg: MixtureConfig = MixtureConfig()) -> float:
    """``log sum_M pi_M p_M(x | theta_M)``; ``-inf`` when every component vanishes."""
    x = _data(data)
    terms = []
    for lw, p in zip(cfg.log_weights, state.blocks):
        model = _model_of_params(p)
        val = float(block_loglik(model, p.__dict__, x)[0])
        terms.append(lw + val if lw > -np.inf else -np.inf)
    return float(logsumexp(terms)) if np.any(np.isfinite(terms)) else -np.inf


def _model_of_params(p) -> Model:
    for model, cls in ((Model.FRECHET, FrechetParams), (Model.WEIBULL, WeibullParams),
                       (Model.GUMBEL, GumbelParams)):
        if isinstance(p, cls):
            return model
    raise DomainError(f"not a parameter set: {p!r}")


@dataclass(frozen=True)
class MixtureState:
    theta_F: FrechetParams
    theta_W: WeibullParams
    theta_G: GumbelParams

    @property
    def blocks(self) -> tuple:
        return (self.theta_F, self.theta_W, self.theta_G)


# -- full conditionals -----------------------------------------------------


def _shape_hyper_check(model: Model, h):
    want = FrechetHyper if model is Model.FRECHET else WeibullHyper
    if model is Model.GUMBEL or not isinstance(h, want):
        raise DomainError(f"{model.value} needs {want.__name__}")


def _log_s_xi(model, mu, h):
    return np.log(priors.s2(mu, h) if model is Model.FRECHET else priors.s4(mu, h))


def conditional_nu_posterior(model, mu: float, xi: float, h, data) -> tuple:
    """Gamma ``(shape, rate)`` of ``nu | mu, xi, x``."""
    model = Model.parse(model)
    _shape_hyper_check(model, h)
    x = _data(data)
    t = x - mu if model is Model.FRECHET else mu - x
    if np.any(t <= 0) or not xi > 0:
        raise DomainError("data outside the support for this location")
    s = priors.s1(mu, xi, h) if model is Model.FRECHET else priors.s3(mu, xi, h)
    a = -1.0 / xi if model is Model.FRECHET else 1.0 / xi
    return float(h.m + x.size), float(s + np.sum(t ** a))


def log_conditional_xi(model, xi, mu: float, h, data):
    """Unnormalized ``log pi(xi | mu, x)``::

        xi^(-n-m-1) s^m / (s + sum t_i^a)^(m+n) * exp(-(s_xi -+ sum log t_i) / xi)

    with ``(s, s_xi, a) = (s1, s2, -1/xi)`` for Frechet and ``(s3, s4, 1/xi)`` for Weibull.
    """
    model = Model.parse(model)
    _shape_hyper_check(model, h)
    x = _data(data)
    xi_arr = np.atleast_1d(np.asarray(xi, float))
    n, m = x.size, h.m
    t = x - mu if model is Model.FRECHET else mu - x
    if np.any(t <= 0):
        out = np.full(xi_arr.shape, -np.inf)
        return float(out[0]) if np.ndim(xi) == 0 else out
    lt = np.log(t)
    s_xi = float(np.exp(_log_s_xi(model, mu, h)))
    d = h.x_e1 - mu if model is Model.FRECHET else mu - h.x_e3
    sign = -1.0 if model is Model.FRECHET else 1.0
    out = np.full(xi_arr.shape, -np.inf)
    pos = xi_arr > 0
    xs = xi_arr[pos]
    a = sign / xs
    log_s = np.log(m) + a * np.log(d)
    log_rate = np.logaddexp(log_s, logsumexp(a[:, None] * lt[None, :], axis=1)) if n else log_s
    out[pos] = ((-n - m - 1) * np.log(xs) + m * log_s - (m + n) * log_rate
                - (s_xi - sign * lt.sum()) / xs)
    return float(out[0]) if np.ndim(xi) == 0 else out


def log_xi_envelope(model, xi, mu: float, h, data):
    """Inverse-gamma bound on :func:`log_conditional_xi` from the AM-GM inequality.

    ``log_conditional_xi <= m log m - (m+n) log(m+n) - (n+m+1) log xi - s_xi / xi``.
    """
    model = Model.parse(model)
    _shape_hyper_check(model, h)
    n, m = _data(data).size, h.m
    xi = np.asarray(xi, float)
    s_xi = float(np.exp(_log_s_xi(model, mu, h)))
    return m * np.log(m) - (m + n) * np.log(m + n) - (n + m + 1) * np.log(xi) - s_xi / xi


def log_conditional_mu(model, mu, nu: float, xi: float, h, data):
    """Unnormalized ``log pi(mu | nu, xi, x) = log pi(mu) pi(xi | mu) pi(nu | mu, xi) p(x | theta)``.

    ``-inf`` outside the prior range of mu or when data fall outside the support.
    """
    model = Model.parse(model)
    _shape_hyper_check(model, h)
    x = _data(data)
    mu_arr = np.atleast_1d(np.asarray(mu, float))
    lo, hi = h.mu_bounds
    inside = (mu_arr > lo) & (mu_arr < hi) if model is Model.FRECHET else (mu_arr > lo) & (mu_arr <= hi)
    if model is Model.FRECHET:
        inside |= mu_arr == lo
    out = np.full(mu_arr.shape, -np.inf)
    mm = mu_arr[inside]
    if mm.size:
        ok, a, lt, log_s = _shape_terms(model, h, mm, np.full(mm.shape, xi), x)
        log_pi = priors.log_pi_mu_frechet(mm, h) if model is Model.FRECHET else priors.log_pi_mu_weibull(mm, h)
        s_xi = np.exp(_log_s_xi(model, mm, h))
        val = (log_pi + priors.log_invgamma_pdf(xi, h.m, s_xi)
               + priors.log_gamma_pdf(nu, h.m, log_s)
               + _loglik_shape(model, mm, np.full(mm.shape, nu), np.full(mm.shape, xi), x))
        out[inside] = np.where(ok, val, -np.inf)
    return float(out[0]) if np.ndim(mu) == 0 else out


def shifted_geometric_mean(model, mu: float, data) -> float:
    """``mu +- prod |x_i - mu|^(1/n)``, the data summary entering the mu conditional."""
    model = Model.parse(model)
    x = _data(data)
    t = x - mu if model is Model.FRECHET else mu - x
    if np.any(t <= 0):
        raise DomainError("data outside the support for this location")
    g = float(np.exp(np.mean(np.log(t))))
    return mu + g if model is Model.FRECHET else mu - g


# -- blocks ------------------------------------------------------------------


class _Block:
    """One sub-model inside the mixture, in unconstrained coordinates ``u`` (dimension 2)."""

    model: Model
    names: tuple

    def __init__(self, label: str, h, x: np.ndarray):
        self.label, self.h, self.x = label, h, x

    # log prior density of u (Jacobian included), vectorized over rows
    def log_prior_u(self, u):
        raise NotImplementedError

    # collapsed log-likelihood of u
    def loglik_u(self, u):
        raise NotImplementedError

    def prior_u(self, rng, size):
        raise NotImplementedError

    def evaluate(self, u):
        """``(log prior, collapsed log-likelihood)`` of u."""
        return self.log_prior_u(u), self.loglik_u(u)

    def start_u(self) -> list:
        raise NotImplementedError

    def complete(self, u, lm, log_mix_other, log_w, bank, i):
        """Full parameters and full log-likelihood after the (collapsed) block update.

        ``lm`` is the collapsed log-likelihood at u.
        """
        raise NotImplementedError

    def bank_extra(self, rng, k):
        return {}


class _ShapeBlock(_Block):
    names = ("mu", "nu", "xi")

    def __init__(self, label, h, x):
        super().__init__(label, h, x)
        self.model = _model_of_hyper(h)
        self.lo, self.hi = h.mu_bounds
        self.width = self.hi - self.lo
        self._log_width = np.log(self.width)
        self._log_m = np.log(h.m)
        self._lg_m = gammaln(h.m)
        self._lg_ratio = gammaln(h.m + x.size) - gammaln(h.m)

    def mu_xi(self, u):
        mu = self.lo + self.width * expit(u[:, 0])
        return mu, np.exp(u[:, 1])

    def to_u(self, mu, xi):
        p = np.clip((np.asarray(mu) - self.lo) / self.width, 1e-15, 1 - 1e-15)
        return np.column_stack([logit(p), np.log(xi)])

    def log_prior_u(self, u):
        mu, xi = self.mu_xi(u)
        h = self.h
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.model is Model.FRECHET:
                inside = (mu >= self.lo) & (mu < self.hi)
                log_pi = priors.log_pi_mu_frechet(mu, h)
                s_xi = h.m * np.log((h.x_e2 - mu) / (h.x_e1 - mu))
            else:
                inside = (mu > self.lo) & (mu <= self.hi)
                log_pi = priors.log_pi_mu_weibull(mu, h)
                s_xi = h.m * np.log((mu - h.x_e3) / (mu - h.x_e4))
            val = (log_pi + priors.log_invgamma_pdf(xi, h.m, s_xi)
                   + np.log(self.width) + log_expit(u[:, 0]) + log_expit(-u[:, 0]) + u[:, 1])
        return np.where(inside & np.isfinite(val), val, -np.inf)

    def loglik_u(self, u):
        mu, xi = self.mu_xi(u)
        return collapsed_loglik(self.model, self.h, mu, xi, self.x)

    def evaluate(self, u):
        # same quantities as log_prior_u and loglik_u, sharing the transforms;
        # called inside the sampler's errstate block
        h, x = self.h, self.x
        e = expit(u[:, 0])
        mu = self.lo + self.width * e
        xi = np.exp(u[:, 1])
        inv = 1.0 / xi
        if self.model is Model.FRECHET:
            inside = (mu >= self.lo) & (mu < self.hi)
            d_anchor, d2 = h.x_e1 - mu, h.x_e2 - mu
            s_xi = h.m * np.log(d2 / d_anchor)
            z = (h.x_e2 - h.x_e1) / d2
            t = x[None, :] - mu[:, None]
            a = -inv
        else:
            inside = (mu > self.lo) & (mu <= self.hi)
            d_anchor = mu - h.x_e3
            s_xi = h.m * np.log(d_anchor / (mu - h.x_e4))
            z = (h.x_e4 - h.x_e3) / d_anchor
            t = mu[:, None] - x[None, :]
            a = inv
        log_pi = -h.m * np.log(-np.log1p(-z) / z)
        m = h.m
        lp = (log_pi + m * np.log(s_xi) - self._lg_m - (m + 1) * u[:, 1] - s_xi * inv
              + self._log_width + np.log(e) + np.log1p(-e) + u[:, 1])
        lp = np.where(inside & np.isfinite(lp), lp, -np.inf)
        ok = (xi > XI_MIN) & (xi < XI_MAX) & (d_anchor > 0)
        log_s = self._log_m + a * np.log(np.abs(d_anchor))
        n = x.size
        if n == 0:
            return lp, np.where(ok, 0.0, -np.inf)
        ok &= np.min(t, axis=1) > 0
        lt = np.log(np.abs(t))
        at = a[:, None] * lt
        mx = np.max(at, axis=1)
        log_rate = np.logaddexp(log_s, np.log(np.sum(np.exp(at - mx[:, None]), axis=1)) + mx)
        lm = (-n * u[:, 1] + (a - 1.0) * lt.sum(axis=1) + self._lg_ratio
              + m * log_s - (m + n) * log_rate)
        return lp, np.where(ok & np.isfinite(lm), lm, -np.inf)

    def prior_u(self, rng, size):
        draw = (priors.sample_prior_frechet if self.model is Model.FRECHET
                else priors.sample_prior_weibull)(self.h, rng, size)
        return self.to_u(draw["mu"], draw["xi"])

    def start_u(self):
        x, lo, hi = self.x, self.lo, self.hi
        starts = []
        for xi in (0.1, 0.3, 1.0):
            if self.model is Model.FRECHET:
                top = min(hi, x.min()) if x.size else hi
                for f in (0.5, 0.9, 0.99):
                    if top > lo:
                        starts.append((lo + f * (top - lo), xi))
            else:
                base = max(lo, x.max()) if x.size else lo
                spread = (np.ptp(x) if x.size > 1 else 1.0) or 1.0
                for f in (0.05, 0.5, 2.0):
                    mu = base + f * spread
                    if mu < hi:
                        starts.append((mu, xi))
        return [self.to_u(np.array([a]), np.array([b]))[0] for a, b in starts]

    def bank_extra(self, rng, k):
        n = self.x.size
        return {"g_prior": rng.gamma(self.h.m, size=k), "g_post": rng.gamma(self.h.m + n, size=k),
                "u_nu": rng.random(k)}

    def complete(self, u, lm, log_mix_other, log_w, bank, i):
        mu, xi = self.mu_xi(u)
        ok, a, lt, log_s = _shape_terms(self.model, self.h, mu, xi, self.x)
        with np.errstate(invalid="ignore", over="ignore"):
            log_rate_post = np.logaddexp(log_s, _lse(a[:, None] * lt, axis=1)) if self.x.size else log_s
            # P(posterior component) = w lm / (other + w lm)
            p_post = expit((log_w + lm) - log_mix_other)
        p_post = np.where(np.isnan(p_post), np.where(lm > -np.inf, 1.0, 0.0), p_post)
        take = bank["u_nu"][:, i] < p_post
        log_nu = np.where(take, np.log(bank["g_post"][:, i]) - log_rate_post,
                          np.log(bank["g_prior"][:, i]) - log_s)
        params = {"mu": mu, "nu": np.exp(log_nu), "xi": xi}
        return params, _loglik_shape(self.model, mu, params["nu"], xi, self.x)


class _GumbelBlock(_Block):
    model = Model.GUMBEL
    names = ("mu", "sigma")

    def __init__(self, label, h, x):
        super().__init__(label, h, x)
        self.mu_inf = h.mu_inf

    def mu_sigma(self, u):
        mu = u[:, 0] if self.mu_inf is None else self.mu_inf + np.exp(u[:, 0])
        return mu, np.exp(u[:, 1])

    def to_u(self, mu, sigma):
        mu = np.asarray(mu, float)
        u0 = mu if self.mu_inf is None else np.log(np.maximum(mu - self.mu_inf, 1e-300))
        return np.column_stack([u0, np.log(sigma)])

    def log_prior_u(self, u):
        mu, sigma = self.mu_sigma(u)
        jac = u[:, 1] + (0.0 if self.mu_inf is None else u[:, 0])
        val = priors.log_gumbel_prior(mu, sigma, self.h) + jac
        return np.where(np.isfinite(val), val, -np.inf)

    def loglik_u(self, u):
        mu, sigma = self.mu_sigma(u)
        return _loglik_gumbel(mu, sigma, self.x)

    def prior_u(self, rng, size):
        draw = priors.sample_prior_gumbel_exact(self.h, rng, size)
        return self.to_u(draw.mu, draw.sigma)

    def start_u(self):
        x = self.x
        if x.size > 1:
            sd = np.std(x) or 1.0
            sigma = sd * np.sqrt(6) / np.pi
            mu = np.mean(x) - 0.5772 * sigma
        else:
            sigma = np.std(self.h.values)
            mu = self.h.mean_virtual
        if self.mu_inf is not None:
            mu = max(mu, self.mu_inf + 1e-3 * sigma)
        return [self.to_u(np.array([mu]), np.array([sigma]))[0]]

    def complete(self, u, lm, log_mix_other, log_w, bank, i):
        mu, sigma = self.mu_sigma(u)
        return {"mu": mu, "sigma": sigma}, _loglik_gumbel(mu, sigma, self.x)


def _make_block(label, h, x) -> _Block:
    model = _model_of_hyper(h)
    return _GumbelBlock(label, h, x) if model is Model.GUMBEL else _ShapeBlock(label, h, x)


# -- Laplace approximation --------------------------------------------------


@dataclass
class Laplace:
    mode: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    log_det: float

    @property
    def inv_chol(self) -> np.ndarray:
        if not hasattr(self, "_inv"):
            self._inv = np.linalg.inv(self.chol)
        return self._inv


def _num_hessian(f, x, eps=1e-4):
    d = x.size
    hess = np.empty((d, d))
    step = eps * (1.0 + np.abs(x))
    for i in range(d):
        for j in range(i, d):
            ei, ej = np.zeros(d), np.zeros(d)
            ei[i], ej[j] = step[i], step[j]
            val = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * step[i] * step[j])
            hess[i, j] = hess[j, i] = val
    return hess


def fit_laplace(block: _Block, rng: np.random.Generator, n_prior: int = 500) -> Optional[Laplace]:
    """Mode and curvature of the single-model collapsed posterior in ``u``; None if the data rule it out."""
    def neg(u):
        u = np.atleast_2d(u)
        v = block.log_prior_u(u) + block.loglik_u(u)
        return float(-v[0]) if np.isfinite(v[0]) else 1e300

    cands = list(block.start_u())
    try:
        pu = block.prior_u(rng, n_prior)
        vals = block.log_prior_u(pu) + block.loglik_u(pu)
        if np.any(np.isfinite(vals)):
            cands.append(pu[int(np.argmax(vals))])
    except (SamplingDiagnosticsError, DomainError, FloatingPointError):
        pass
    cands = [c for c in cands if neg(c) < 1e300]
    if not cands:
        return None
    best = min(cands, key=neg)
    res = optimize.minimize(neg, best, method="Nelder-Mead",
                            options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 4000})
    res2 = optimize.minimize(neg, res.x, method="BFGS")
    mode = res2.x if res2.fun <= res.fun else res.x
    hess = _num_hessian(neg, mode)
    try:
        cov = np.linalg.inv(hess)
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(chol)):
        return None
    return Laplace(mode, cov, chol, 2.0 * float(np.sum(np.log(np.diag(chol)))))


def _log_t_density(u, lap: Laplace, df: float):
    d = u.shape[1]
    z = (u - lap.mode) @ lap.inv_chol.T
    q = np.sum(z * z, axis=1)
    return (gammaln((df + d) / 2) - gammaln(df / 2) - d / 2 * np.log(df * np.pi)
            - 0.5 * lap.log_det - (df + d) / 2 * np.log1p(q / df))


# -- draws and diagnostics ---------------------------------------------------


@dataclass
class PosteriorDraws:
    labels: tuple
    models: tuple
    params: Dict[str, Dict[str, np.ndarray]]    # label -> name -> (chains, draws)
    weights: np.ndarray                          # (chains, draws, blocks); rows sum to 1
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.weights.shape[0]

    @property
    def n_draws(self) -> int:
        return self.weights.shape[1]

    def block_index(self, tag) -> int:
        if isinstance(tag, str) and tag in self.labels:
            return self.labels.index(tag)
        model = Model.parse(tag)
        hits = [i for i, m in enumerate(self.models) if m is model]
        if len(hits) != 1:
            raise DomainError(f"ambiguous or unknown block {tag!r}")
        return hits[0]

    def columns(self) -> List[str]:
        cols = ["chain", "draw"]
        for lab in self.labels:
            cols += [f"{lab}.{k}" for k in self.params[lab]]
        return cols + [f"W.{lab}" for lab in self.labels]

    def to_csv(self, path) -> None:
        """Columnar text, one row per retained draw."""
        c, s = self.n_chains, self.n_draws
        blocks = [np.repeat(np.arange(c), s), np.tile(np.arange(s), c)]
        for lab in self.labels:
            blocks += [v.reshape(-1) for v in self.params[lab].values()]
        blocks += [self.weights[:, :, k].reshape(-1) for k in range(len(self.labels))]
        with open(path, "w", newline="") as fh:
            fh.write("# models=" + ",".join(m.value for m in self.models) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns())
            for row in zip(*blocks):
                w.writerow([int(row[0]), int(row[1])] + [repr(float(v)) for v in row[2:]])

    @classmethod
    def from_csv(cls, path) -> "PosteriorDraws":
        with open(path, newline="") as fh:
            first = fh.readline().strip()
            if not first.startswith("# models="):
                raise DomainError("missing model header")
            models = tuple(Model.parse(t) for t in first[len("# models="):].split(","))
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], float)
        chain = body[:, 0].astype(int)
        c = chain.max() + 1
        s = body.shape[0] // c
        labels = tuple(h[2:] for h in header if h.startswith("W."))
        params = {lab: {} for lab in labels}
        for j, name in enumerate(header):
            if "." in name and not name.startswith("W."):
                lab, k = name.split(".", 1)
                params[lab][k] = body[:, j].reshape(c, s)
        weights = np.stack([body[:, header.index(f"W.{lab}")].reshape(c, s) for lab in labels], axis=-1)
        return cls(labels, models, params, weights)


def split_rhat(x: np.ndarray) -> float:
    """Rank-normalized split R-hat (max of bulk and folded versions); ``x`` is (chains, draws)."""
    x = np.asarray(x, float)
    n = x.shape[1] // 2
    if n < 2:
        return np.nan
    halves = np.concatenate([x[:, :n], x[:, -n:]], axis=0)

    def rhat(y):
        if np.ptp(y) == 0:
            return 1.0
        r = rankdata(y, method="average").reshape(y.shape)
        z = norm.ppf((r - 0.375) / (y.size + 0.25))
        w = z.var(axis=1, ddof=1).mean()
        b = n * z.mean(axis=1).var(ddof=1)
        var = (n - 1) / n * w + b / n
        return float(np.sqrt(var / w)) if w > 0 else np.inf

    folded = np.abs(halves - np.median(halves))
    return max(rhat(halves), rhat(folded))


def batch_means_se(x: np.ndarray) -> float:
    """Monte Carlo standard error of the mean of ``x`` (chains, draws) by batch means."""
    x = np.asarray(x, float)
    s = x.shape[1]
    b = max(int(np.sqrt(s)), 1)
    nb = s // b
    if nb < 2:
        return np.nan
    means = x[:, : nb * b].reshape(x.shape[0], nb, b).mean(axis=2).ravel()
    return float(means.std(ddof=1) / np.sqrt(means.size))


# -- sampler ---------------------------------------------------------------


def _seed_sequence(rng) -> np.random.SeedSequence:
    if isinstance(rng, np.random.SeedSequence):
        return rng
    if isinstance(rng, np.random.Generator):
        return np.random.SeedSequence(int(rng.integers(2 ** 63)))
    return np.random.SeedSequence(0 if rng is None else int(rng))


def _fill_bank(blocks, laps, rngs, k, df):
    """Per-chain random numbers for ``k`` sweeps, stacked along axis 0 (chains)."""
    bank = []
    for b, lap in zip(blocks, laps):
        per = []
        for r in rngs:
            d = {"eps": r.standard_normal((k, 2)), "u_rw": r.random(k),
                 "prior": b.prior_u(r, k), "u_pr": r.random(k),
                 "t_z": r.standard_normal((k, 2)), "t_chi": r.chisquare(df, size=k), "u_lp": r.random(k)}
            d.update(b.bank_extra(r, k))
            per.append(d)
        bank.append({key: np.stack([p[key] for p in per]) for key in per[0]})
    return bank


def _sample_mixture(blocks: List[_Block], cfg: MixtureConfig, settings: MCMCSettings, rng) -> PosteriorDraws:
    k_blocks = len(blocks)
    if len(cfg.prior_weights) != k_blocks:
        raise ConfigurationError("one prior weight per block is required")
    ss = _seed_sequence(rng)
    children = ss.spawn(settings.n_chains + 1)
    setup_rng = np.random.default_rng(children[0])
    rngs = [np.random.default_rng(c) for c in children[1:]]
    c = settings.n_chains
    log_w = cfg.log_weights
    df = settings.laplace_df

    laps = [fit_laplace(b, setup_rng) if b.x.size else None for b in blocks]

    # initial states: Laplace draws where available, prior draws otherwise
    u = []
    for b, lap in zip(blocks, laps):
        if lap is not None:
            z = setup_rng.standard_normal((c, 2)) / np.sqrt(setup_rng.chisquare(df, c) / df)[:, None]
            cand = lap.mode + z @ lap.chol.T
            bad = ~np.isfinite(b.log_prior_u(cand) + b.loglik_u(cand))
            cand[bad] = lap.mode
        else:
            cand = b.prior_u(setup_rng, c)
        u.append(cand)
    lp = [b.log_prior_u(ub) for b, ub in zip(blocks, u)]
    lm = [b.loglik_u(ub) for b, ub in zip(blocks, u)]

    # full parameters need nu; start from the conditional given the other blocks' collapsed fits
    init_bank = [{**b.bank_extra(setup_rng, c)} for b in blocks]
    init_bank = [{k: v[:, None] for k, v in d.items()} for d in init_bank]
    full, L = [], []
    for j, b in enumerate(blocks):
        others = [log_w[k] + lm[k] for k in range(k_blocks) if k != j]
        lo = logsumexp(np.stack(others), axis=0) if others else np.full(c, -np.inf)
        p, ll = b.complete(u[j], lm[j], lo, log_w[j], init_bank[j], 0)
        full.append(p)
        L.append(ll)
    if not np.all(np.isfinite(logsumexp(np.stack([log_w[j] + L[j] for j in range(k_blocks)]), axis=0))):
        raise SamplingDiagnosticsError("no block supports the data at the initial state")

    chol_rw = [(2.38 / np.sqrt(2)) * (lap.chol if lap is not None else 0.5 * np.eye(2)) for lap in laps]
    log_scale = [np.zeros(c) for _ in blocks]
    n_keep = settings.n_retained
    out = {b.label: {k: np.empty((c, n_keep)) for k in b.names} for b in blocks}
    w_out = np.empty((c, n_keep, k_blocks))
    acc = {b.label: {"rw": np.zeros(c), "prior": np.zeros(c), "laplace": np.zeros(c)} for b in blocks}
    n_post = 0

    # invalid states are handled through -inf values, so silence numpy inside the loop
    with np.errstate(all="ignore"):
        bank, pos = None, settings.chunk
        for it in range(settings.n_iter):
            if pos == settings.chunk:
                bank, pos = _fill_bank(blocks, laps, rngs, settings.chunk, df), 0
            burn = it < settings.burn_in
            for j, b in enumerate(blocks):
                bk = bank[j]
                others = [log_w[k] + L[k] for k in range(k_blocks) if k != j]
                rest = _lse(np.stack(others), axis=0) if others else np.full(c, -np.inf)
                tgt = lp[j] + np.logaddexp(rest, log_w[j] + lm[j])

                # random walk
                prop = u[j] + np.exp(log_scale[j])[:, None] * (bk["eps"][:, pos] @ chol_rw[j].T)
                lp_p, lm_p = b.evaluate(prop)
                tgt_p = lp_p + np.logaddexp(rest, log_w[j] + lm_p)
                a = _accept(tgt_p - tgt, bk["u_rw"][:, pos], tgt_p)
                u[j], lp[j], lm[j], tgt = _swap(a, (prop, lp_p, lm_p, tgt_p), (u[j], lp[j], lm[j], tgt))
                if burn:
                    gamma = min(0.5, 10.0 / (it + 10) ** 0.6)
                    log_scale[j] += gamma * (a - settings.target_accept)
                else:
                    acc[b.label]["rw"] += a

                # independence move from the prior: prior terms cancel
                prop = bk["prior"][:, pos]
                lp_p, lm_p = b.evaluate(prop)
                tgt_p = lp_p + np.logaddexp(rest, log_w[j] + lm_p)
                ratio = np.logaddexp(rest, log_w[j] + lm_p) - np.logaddexp(rest, log_w[j] + lm[j])
                a = _accept(ratio, bk["u_pr"][:, pos], tgt_p)
                u[j], lp[j], lm[j], tgt = _swap(a, (prop, lp_p, lm_p, tgt_p), (u[j], lp[j], lm[j], tgt))
                if not burn:
                    acc[b.label]["prior"] += a

                # independence move from the Laplace t approximation
                lap = laps[j]
                if lap is not None:
                    z = bk["t_z"][:, pos] / np.sqrt(bk["t_chi"][:, pos] / df)[:, None]
                    prop = lap.mode + z @ lap.chol.T
                    lp_p, lm_p = b.evaluate(prop)
                    tgt_p = lp_p + np.logaddexp(rest, log_w[j] + lm_p)
                    ratio = tgt_p - tgt + _log_t_density(u[j], lap, df) - _log_t_density(prop, lap, df)
                    a = _accept(ratio, bk["u_lp"][:, pos], tgt_p)
                    u[j], lp[j], lm[j], tgt = _swap(a, (prop, lp_p, lm_p, tgt_p), (u[j], lp[j], lm[j], tgt))
                    if not burn:
                        acc[b.label]["laplace"] += a

                full[j], L[j] = b.complete(u[j], lm[j], rest, log_w[j], bk, pos)
            pos += 1

            if not burn and (it - settings.burn_in) % settings.thin == 0:
                s = (it - settings.burn_in) // settings.thin
                if s < n_keep:
                    for b, p in zip(blocks, full):
                        for k in b.names:
                            out[b.label][k][:, s] = p[k]
                    terms = np.stack([log_w[k] + L[k] for k in range(k_blocks)], axis=1)
                    with np.errstate(invalid="ignore"):
                        w_out[:, s] = np.exp(terms - logsumexp(terms, axis=1, keepdims=True))
                    n_post += 1

    n_steps = max(settings.n_iter - settings.burn_in, 1)
    diag = {
        "n_chains": c, "n_iter": settings.n_iter, "burn_in": settings.burn_in, "thin": settings.thin,
        "acceptance": {lab: {k: float(v.mean()) / n_steps for k, v in d.items()} for lab, d in acc.items()},
        "laplace": {b.label: laps[j] is not None for j, b in enumerate(blocks)},
    }
    draws = PosteriorDraws(tuple(b.label for b in blocks), tuple(b.model for b in blocks), out, w_out, diag)
    rh = rhat_table(draws)
    finite = [v for v in rh.values() if np.isfinite(v)]
    draws.diagnostics["rhat"] = rh
    draws.diagnostics["max_rhat"] = max(finite) if finite else np.nan
    draws.diagnostics["converged"] = bool(finite) and max(finite) <= settings.rhat_threshold
    if not draws.diagnostics["converged"]:
        log.warning("split R-hat %.3f exceeds %.2f", draws.diagnostics["max_rhat"], settings.rhat_threshold)
    return draws


def _accept(log_ratio, unif, tgt_p):
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(tgt_p) & ~(np.log(unif) > np.where(np.isnan(log_ratio), np.inf, log_ratio))
    return ok.astype(float)


def _swap(a, new, old):
    sel = a.astype(bool)
    res = []
    for n_, o_ in zip(new, old):
        if n_.ndim == 2:
            res.append(np.where(sel[:, None], n_, o_))
        else:
            res.append(np.where(sel, n_, o_))
    return tuple(res)


def rhat_table(draws: PosteriorDraws) -> Dict[str, float]:
    out = {}
    for lab in draws.labels:
        for k, v in draws.params[lab].items():
            out[f"{lab}.{k}"] = split_rhat(v)
    for j, lab in enumerate(draws.labels):
        out[f"W.{lab}"] = split_rhat(draws.weights[:, :, j])
    return out


def mixture_posterior_mcmc(data, hypers: Sequence[Hyper], cfg: MixtureConfig = MixtureConfig(),
                           settings: MCMCSettings = MCMCSettings(), rng=None,
                           labels: Optional[Sequence[str]] = None) -> PosteriorDraws:
    """Sample the mixture posterior for any list of block priors (usually Frechet, Weibull, Gumbel).

    Block parameters are never truncated by the data: a block whose current
    state cannot produce the data simply has ``W = 0`` at that draw.
    """
    x = _data(data)
    if x.size == 0:
        log.info("no data: sampling the block priors")
    hypers = list(hypers)
    if labels is None:
        models = [_model_of_hyper(h) for h in hypers]
        labels = [m.value if models.count(m) == 1 else f"{m.value}{i}" for i, m in enumerate(models)]
    if len(set(labels)) != len(labels):
        raise ConfigurationError("block labels must be unique")
    blocks = [_make_block(lab, h, x) for lab, h in zip(labels, hypers)]
    return _sample_mixture(blocks, cfg, settings, rng)


# -- summaries -------------------------------------------------------------


def model_posterior_probs(draws: PosteriorDraws) -> np.ndarray:
    """Mean over retained draws of the per-draw weights ``W_M``."""
    if draws.n_draws == 0:
        raise DomainError("no draws")
    p = draws.weights.reshape(-1, draws.weights.shape[-1]).mean(axis=0)
    return p / p.sum()


def model_posterior_se(draws: PosteriorDraws) -> np.ndarray:
    return np.array([batch_means_se(draws.weights[:, :, j]) for j in range(len(draws.labels))])


@dataclass
class WeightedSample:
    params: Dict[str, np.ndarray]
    weights: np.ndarray
    ess: float

    def mean(self, name: str) -> float:
        return float(np.sum(self.weights * self.params[name]))

    def quantile(self, name: str, q) -> np.ndarray:
        return weighted_quantile(self.params[name], self.weights, q)


def weighted_quantile(values, weights, q):
    v, w = np.asarray(values, float), np.asarray(weights, float)
    order = np.argsort(v)
    v, w = v[order], w[order]
    cum = np.cumsum(w) - 0.5 * w
    cum /= w.sum()
    return np.interp(q, cum, v)


def per_model_posterior(draws: PosteriorDraws, tag, resample: Optional[int] = None,
                        rng=None) -> WeightedSample:
    """Draws of one block weighted by its ``W`` (optionally resampled to equal weights)."""
    j = draws.block_index(tag)
    lab = draws.labels[j]
    w = draws.weights[:, :, j].reshape(-1)
    total = w.sum()
    if not total > 0:
        raise SamplingDiagnosticsError(f"block {lab} has vanishing posterior weight")
    w = w / total
    params = {k: v.reshape(-1) for k, v in draws.params[lab].items()}
    ess = float(1.0 / np.sum(w * w))
    if resample:
        r = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        idx = r.choice(w.size, size=int(resample), p=w)
        params = {k: v[idx] for k, v in params.items()}
        w = np.full(int(resample), 1.0 / int(resample))
    return WeightedSample(params, w, ess)


def _cdf_matrix(model: Model, p: dict, xs: np.ndarray) -> np.ndarray:
    """``F_M(x_k | theta_s)`` for every draw s (rows) and point k (columns)."""
    mu = p["mu"][:, None]
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        if model is Model.GUMBEL:
            return np.exp(-np.exp(-(xs[None, :] - mu) / p["sigma"][:, None]))
        nu, xi = p["nu"][:, None], p["xi"][:, None]
        if model is Model.FRECHET:
            t = xs[None, :] - mu
            return np.where(t > 0, np.exp(-nu * np.power(np.where(t > 0, t, 1.0), -1.0 / xi)), 0.0)
        t = mu - xs[None, :]
        return np.where(t > 0, np.exp(-nu * np.power(np.where(t > 0, t, 0.0), 1.0 / xi)), 1.0)


def _quantile_vec(model: Model, p: dict, q: float) -> np.ndarray:
    e = -np.log(q)
    with np.errstate(divide="ignore", over="ignore"):
        if model is Model.GUMBEL:
            return p["mu"] - p["sigma"] * np.log(e)
        if model is Model.FRECHET:
            return p["mu"] + np.power(e / p["nu"], -p["xi"])
        return p["mu"] - np.power(e / p["nu"], p["xi"])


def _subset(draws: PosteriorDraws, max_draws: int) -> np.ndarray:
    total = draws.n_chains * draws.n_draws
    return np.unique(np.linspace(0, total - 1, min(max_draws, total)).astype(int))


def _predictive_parts(draws: PosteriorDraws, max_draws: int):
    """Per block: (weights, parameter arrays) restricted to draws with positive weight."""
    idx = _subset(draws, max_draws)
    w = draws.weights.reshape(-1, len(draws.labels))[idx]
    parts = []
    for j, (lab, model) in enumerate(zip(draws.labels, draws.models)):
        keep = w[:, j] > 0
        p = {k: v.reshape(-1)[idx][keep] for k, v in draws.params[lab].items()}
        parts.append((model, w[keep, j], p))
    return parts, idx.size


def predictive_cdf(draws: PosteriorDraws, x, max_draws: int = 4000):
    """Posterior predictive ``P(X <= x) = mean_s sum_M W_M(s) F_M(x | theta_M(s))``.

    Uses at most ``max_draws`` evenly spaced retained draws.
    """
    parts, n = _predictive_parts(draws, max_draws)
    xs = np.atleast_1d(np.asarray(x, float))
    acc = np.zeros(xs.size)
    for model, w, p in parts:
        if w.size:
            acc += w @ _cdf_matrix(model, p, xs)
    acc /= n
    return float(acc[0]) if np.ndim(x) == 0 else acc


def predictive_quantile(draws: PosteriorDraws, q: float, max_draws: int = 4000) -> float:
    """Invert the mixture-weighted posterior predictive CDF."""
    if not 0 < q < 1:
        raise DomainError("quantile order must lie in (0, 1)")
    parts, n = _predictive_parts(draws, max_draws)
    # every per-draw CDF crosses q between the smallest and largest per-draw quantile
    qs = np.concatenate([_quantile_vec(model, p, q) for model, w, p in parts if w.size])
    qs = qs[np.isfinite(qs)]
    lo, hi = float(qs.min()), float(qs.max())
    if hi <= lo:
        return lo

    def f(x):
        xs = np.array([x])
        return sum(float(w @ _cdf_matrix(model, p, xs)[:, 0]) for model, w, p in parts if w.size) / n - q

    scale = max(abs(lo), abs(hi), 1.0)
    return float(optimize.brentq(f, lo, hi, xtol=1e-12 * scale, rtol=4 * np.finfo(float).eps))


def return_level(draws: PosteriorDraws, T: float, max_draws: int = 4000) -> float:
    """Level exceeded once every ``T`` blocks on average under the posterior predictive."""
    if not T > 1:
        raise DomainError("return period must exceed 1")
    return predictive_quantile(draws, 1.0 - 1.0 / T, max_draws)


_GEV_SIGN = {Model.FRECHET: 1, Model.WEIBULL: -1, Model.GUMBEL: 0}


@dataclass
class SelectionReport:
    model_probs: Dict[str, float]
    model_probs_se: Dict[str, float]
    summaries: Dict[str, dict]
    gev_shape: Dict[str, dict]
    verdict: dict
    return_levels: Dict[str, float]
    diagnostics: dict
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model_probs": self.model_probs,
            "model_probs_se": self.model_probs_se,
            "summaries": self.summaries,
            "gev_shape": self.gev_shape,
            "verdict": self.verdict,
            "return_levels": self.return_levels,
            "diagnostics": self.diagnostics,
            "provenance": self.provenance,
        }


def _finite(v) -> Optional[float]:
    v = float(v)
    return v if np.isfinite(v) else None


def _summ(ws: WeightedSample, name: str) -> dict:
    with np.errstate(invalid="ignore", over="ignore"):
        q = ws.quantile(name, [0.025, 0.5, 0.975])
        mean = ws.mean(name)
    return {"mean": _finite(mean), "q025": _finite(q[0]), "median": _finite(q[1]), "q975": _finite(q[2])}


def summarize(draws: PosteriorDraws, periods=(10, 50, 100), provenance: Optional[dict] = None,
              max_draws: int = 4000) -> SelectionReport:
    probs = model_posterior_probs(draws)
    se = model_posterior_se(draws)
    summaries, shapes = {}, {}
    for j, (lab, model) in enumerate(zip(draws.labels, draws.models)):
        try:
            ws = per_model_posterior(draws, lab)
        except SamplingDiagnosticsError:
            summaries[lab] = {"ess": 0.0}
            shapes[lab] = {"sign": _GEV_SIGN[model], "mean": None}
            continue
        s = {k: _summ(ws, k) for k in ws.params}
        if model is not Model.GUMBEL:
            with np.errstate(divide="ignore", over="ignore"):
                sig = ws.params["nu"] ** (ws.params["xi"] if model is Model.FRECHET else -ws.params["xi"])
            s["sigma"] = _summ(WeightedSample({"sigma": sig}, ws.weights, ws.ess), "sigma")
            gev = _GEV_SIGN[model] * np.abs(ws.params["xi"])
            shapes[lab] = {"sign": _GEV_SIGN[model], **_summ(WeightedSample({"g": gev}, ws.weights, ws.ess), "g")}
        else:
            shapes[lab] = {"sign": 0, "mean": 0.0, "q025": 0.0, "median": 0.0, "q975": 0.0}
        s["ess"] = ws.ess
        summaries[lab] = s
    best = int(np.argmax(probs))
    verdict = {"model": draws.labels[best], "probability": float(probs[best]),
               "gev_shape_sign": _GEV_SIGN[draws.models[best]]}
    levels = {str(int(T)): return_level(draws, T, max_draws) for T in periods}
    diag = {k: v for k, v in draws.diagnostics.items()}
    return SelectionReport(
        {lab: float(p) for lab, p in zip(draws.labels, probs)},
        {lab: float(v) for lab, v in zip(draws.labels, se)},
        summaries, shapes, verdict, levels, diag, dict(provenance or {}))
