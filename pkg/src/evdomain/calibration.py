"""Prior calibration on expert predictive quantiles and virtual-size balancing.

Frechet and Weibull anchors are chosen by grid search on Cooke's criterion,
a discretized Kullback-Leibler loss between the expert's quantile orders and
the orders reached by the candidate prior predictive.  The prior predictive
CDF is estimated by self-normalized importance sampling with draws frozen
once per calibration, so the loss surface is a smooth deterministic function
of the candidate hyperparameters.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import gammaln, logsumexp
from scipy.stats import norm

from evdomain import priors
from evdomain.evd_core import DomainError, Model
from evdomain.priors import FrechetHyper, GumbelHyper, WeibullHyper

log = logging.getLogger(__name__)

MIN_ESS = 100


class DiagnosticsWarning(UserWarning):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ExpertQuantiles:
    orders: tuple
    values: tuple

    def __post_init__(self):
        o = tuple(float(x) for x in self.orders)
        v = tuple(float(x) for x in self.values)
        object.__setattr__(self, "orders", o)
        object.__setattr__(self, "values", v)
        if len(o) != len(v) or not o:
            raise DomainError("need one value per quantile order")
        if not all(0 < a < 1 for a in o):
            raise DomainError("quantile orders must lie in (0, 1)")
        if any(b <= a for a, b in zip(o, o[1:])) or any(b <= a for a, b in zip(v, v[1:])):
            raise DomainError("orders and values must be strictly increasing")

    @classmethod
    def from_pairs(cls, pairs: Iterable[Sequence[float]]) -> "ExpertQuantiles":
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    def to_pairs(self) -> list:
        return [[o, v] for o, v in zip(self.orders, self.values)]


CORSICA_EXPERT = ExpertQuantiles((0.25, 0.50, 0.75), (75.0, 100.0, 150.0))


@dataclass(frozen=True)
class ISConfig:
    """Importance-sampling settings.

    Frechet: ``mu ~ Normal(kappa_mu, sigma_mu)``, ``xi ~ InvGamma(m, m log rho_xi)``.
    Weibull: ``z = (x_e4 - x_e3) / (mu - x_e3)`` follows the truncated
    InvGamma(1, c) law used by the acceptance-rejection sampler (``z_c``,
    or the rho-dependent default when None) and
    ``xi`` its conditional prior (``kappa_mu``, ``sigma_mu``, ``rho_xi`` unused).
    """

    kappa_mu: float = 0.0
    sigma_mu: float = 50.0
    rho_xi: float = 2.0
    n_draws: int = 100_000
    z_c: Optional[float] = None

    def __post_init__(self):
        if not (self.sigma_mu > 0 and self.rho_xi > 1 and self.n_draws >= 1
                and (self.z_c is None or self.z_c > 0)):
            raise DomainError(f"invalid importance-sampling configuration {self}")


@dataclass(frozen=True)
class GridSpec:
    """Multi-resolution grid: a coarse pass over ``[lo, hi]`` refined down to ``step``.

    ``lo``/``hi`` default to the expert value range widened by ``margin``.
    ``rho`` (Weibull only) is searched on ``log10`` scale.
    """

    lo: Optional[float] = None
    hi: Optional[float] = None
    margin: float = 50.0
    step: float = 0.5
    coarse_step: float = 10.0
    log10_rho_lo: float = -4.0
    log10_rho_hi: float = -2.0
    log10_rho_step: float = 0.05
    log10_rho_coarse_step: float = 0.5
    window: float = 1.0     # refinement half-width, in steps of the previous level

    def bounds(self, expert: ExpertQuantiles) -> tuple[float, float]:
        lo = min(expert.values) - self.margin if self.lo is None else self.lo
        hi = max(expert.values) + self.margin if self.hi is None else self.hi
        if not lo < hi:
            raise ConfigurationError("empty grid range")
        return lo, hi

    def steps(self) -> list:
        return _step_ladder(self.coarse_step, self.step)

    def rho_steps(self) -> list:
        return _step_ladder(self.log10_rho_coarse_step, self.log10_rho_step)


def _step_ladder(coarse, fine):
    out = [float(coarse)]
    while out[-1] > fine * (1 + 1e-9):
        out.append(max(out[-1] / 5.0, fine))
    return out


@dataclass
class CalibrationResult:
    hyper: Union[FrechetHyper, WeibullHyper, GumbelHyper]
    achieved_orders: tuple
    loss: float
    ess: Optional[float] = None
    n_candidates: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        h = self.hyper
        hyper = ({"virtual_data": list(h.virtual_data), "mu_inf": h.mu_inf} if isinstance(h, GumbelHyper)
                 else dict(h.__dict__))
        return {
            "model": _model_of_hyper(h).value,
            "hyper": hyper,
            "achieved_orders": list(self.achieved_orders),
            "loss": self.loss,
            "ess": self.ess,
            "n_candidates": self.n_candidates,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        model = Model.parse(d["model"])
        hyper = (GumbelHyper(tuple(d["hyper"]["virtual_data"]), d["hyper"].get("mu_inf"))
                 if model is Model.GUMBEL
                 else {Model.FRECHET: FrechetHyper, Model.WEIBULL: WeibullHyper}[model](**d["hyper"]))
        return cls(hyper, tuple(d["achieved_orders"]), d["loss"], d.get("ess"), d.get("n_candidates", 0))


def _model_of_hyper(h) -> Model:
    if isinstance(h, FrechetHyper):
        return Model.FRECHET
    if isinstance(h, WeibullHyper):
        return Model.WEIBULL
    if isinstance(h, GumbelHyper):
        return Model.GUMBEL
    raise DomainError(f"not a hyperparameter set: {h!r}")


def cooke_loss(target, achieved) -> float:
    """``sum_i d_i log(d_i / e_i)`` over the gaps of ``(0, target..., 1)`` and ``(0, achieved..., 1)``."""
    t = np.concatenate([[0.0], np.asarray(target, float), [1.0]])
    a = np.concatenate([[0.0], np.asarray(achieved, float), [1.0]])
    if t.size != a.size:
        raise DomainError("target and achieved orders differ in length")
    dt, da = np.diff(t), np.diff(a)
    if np.any(dt <= 0):
        raise DomainError("target orders must be strictly increasing in (0, 1)")
    if np.any(da <= 0):
        return np.inf
    return float(np.sum(dt * np.log(dt / da)))


def _ess(w) -> float:
    s = w.sum()
    return float(s * s / np.sum(w * w)) if s > 0 else 0.0


def _normalized_weights(logw):
    finite = np.isfinite(logw)
    if not finite.any():
        return np.zeros_like(logw)
    w = np.exp(np.where(finite, logw - logw[finite].max(), -np.inf))
    return w / w.sum()


def _log_invgamma(x, shape, scale):
    return shape * np.log(scale) - gammaln(shape) - (shape + 1) * np.log(x) - scale / x


class FrechetPredictive:
    """Frozen importance draws for the Frechet prior predictive CDF at virtual size ``m``."""

    def __init__(self, m: float, mu_inf: float, is_cfg: ISConfig, rng: np.random.Generator):
        self.m, self.mu_inf, self.cfg = float(m), float(mu_inf), is_cfg
        mu = rng.normal(is_cfg.kappa_mu, is_cfg.sigma_mu, is_cfg.n_draws)
        scale = m * np.log(is_cfg.rho_xi)
        xi = scale / rng.gamma(m, size=is_cfg.n_draws)
        log_f = norm.logpdf(mu, is_cfg.kappa_mu, is_cfg.sigma_mu) + _log_invgamma(xi, m, scale)
        # draws below mu_inf never carry weight for any candidate
        keep = mu >= mu_inf
        self.mu, self.xi, self.log_f = mu[keep], xi[keep], log_f[keep]
        self.inv_xi = 1.0 / self.xi
        self.log_xi = np.log(self.xi)
        self.n_total = is_cfg.n_draws

    def weights(self, x_e1: float, x_e2: float):
        m = self.m
        inside = self.mu < x_e1
        mu = self.mu[inside]
        log_ratio = np.log((x_e2 - mu) / (x_e1 - mu))
        log_s2 = np.log(m) + np.log(log_ratio)
        log_pi_mu = -m * np.log((x_e2 - mu) * log_ratio / (x_e2 - x_e1))
        xi, log_xi = self.xi[inside], self.log_xi[inside]
        log_pi_xi = m * log_s2 - gammaln(m) - (m + 1) * log_xi - np.exp(log_s2) / xi
        return inside, _normalized_weights(log_pi_mu + log_pi_xi - self.log_f[inside])

    def cdf(self, xs, h: FrechetHyper, ess_warn: bool = True):
        """Estimated prior predictive ``P(X <= x)`` for each x, and the effective sample size."""
        if h.m != self.m or h.mu_inf != self.mu_inf:
            raise DomainError("hyperparameters do not match the frozen draws")
        inside, w = self.weights(h.x_e1, h.x_e2)
        mu, inv_xi = self.mu[inside], self.inv_xi[inside]
        log_d = np.log(h.x_e1 - mu)
        out = []
        for x in np.atleast_1d(np.asarray(xs, float)):
            above = x > mu
            r = np.log(np.where(above, x - mu, 1.0)) - log_d
            val = np.exp(-self.m * np.log1p(np.exp(-r * inv_xi) / self.m))
            out.append(float(np.sum(w * np.where(above, val, 0.0))))
        ess = _ess(w)
        if ess_warn and ess < MIN_ESS:
            warnings.warn(f"importance sampling ESS {ess:.0f} below {MIN_ESS}", DiagnosticsWarning)
        return np.array(out), ess


class WeibullPredictive:
    """Frozen importance draws for the Weibull prior predictive CDF at virtual size ``m``.

    In ``z = (x_e4 - x_e3) / (mu - x_e3)`` the prior of (mu, xi) depends on
    ``rho`` only; the anchors enter through ``(x - x_e3) / (x_e4 - x_e3)``.
    ``xi`` is drawn from its exact conditional prior, since its scale
    ``s4 = -m log(1 - z)`` shrinks like ``1 / mu`` for large mu.
    """

    def __init__(self, m: float, is_cfg: ISConfig, rng: np.random.Generator):
        self.m, self.cfg = float(m), is_cfg
        self.u = rng.random(is_cfg.n_draws)
        self.g = rng.gamma(m, size=is_cfg.n_draws)
        self.n_total = is_cfg.n_draws
        self._cache = {}

    def draws(self, rho: float):
        """``(z, 1/xi, normalized weights)`` for truncation ratio ``rho``."""
        key = float(rho)
        if key not in self._cache:
            m = self.m
            c = priors.weibull_envelope_c(rho) if self.cfg.z_c is None else self.cfg.z_c
            z = priors.truncated_invgamma1_ppf(self.u, c, rho)
            log_l = np.log(-np.log1p(-z))
            # pi~(z) / instrumental(z), up to constants
            w = _normalized_weights(m * (np.log(z) - log_l) + c / z)
            inv_xi = self.g / (m * np.exp(log_l))
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = (z, inv_xi, w)
        return self._cache[key]

    def cdf(self, xs, h: WeibullHyper, ess_warn: bool = True):
        if h.m != self.m:
            raise DomainError("hyperparameters do not match the frozen draws")
        z, inv_xi, w = self.draws(h.rho)
        a = h.x_e4 - h.x_e3
        out = []
        for x in np.atleast_1d(np.asarray(xs, float)):
            # (mu - x) / (mu - x_e3) = 1 - (x - x_e3) z / a
            base = 1.0 - (x - h.x_e3) / a * z
            below = base > 0
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                val = np.exp(-self.m * np.log1p(np.exp(inv_xi * np.log(base)) / self.m))
            out.append(float(np.sum(w * np.where(below, val, 1.0))))
        ess = _ess(w)
        if ess_warn and ess < MIN_ESS:
            warnings.warn(f"importance sampling ESS {ess:.0f} below {MIN_ESS}", DiagnosticsWarning)
        return np.array(out), ess


def prior_predictive_cdf(x, h: Union[FrechetHyper, WeibullHyper], is_cfg: ISConfig = ISConfig(),
                         rng=None):
    """Importance-sampling estimate of ``P(X <= x)`` under the Frechet or Weibull prior predictive."""
    rng = _rng(rng)
    if isinstance(h, FrechetHyper):
        pred = FrechetPredictive(h.m, h.mu_inf, is_cfg, rng)
    elif isinstance(h, WeibullHyper):
        pred = WeibullPredictive(h.m, is_cfg, rng)
    else:
        raise DomainError("importance sampling applies to Frechet and Weibull priors")
    probs, _ = pred.cdf(x, h)
    return float(probs[0]) if np.ndim(x) == 0 else probs


# -- grid search -----------------------------------------------------------


def _axis(lo, hi, step):
    n = int(np.floor((hi - lo) / step + 1e-9))
    return lo + step * np.arange(n + 1)


def _multires_search(objective: Callable, axes: list, steps: list, window: float = 2.0):
    """Minimize ``objective(point)`` on successively finer grids.

    ``axes`` holds one ``(lo, hi)`` range per coordinate and ``steps`` one
    step ladder per coordinate (all ladders padded to the same length).  Each
    refinement covers ``window`` coarse steps around the incumbent.
    Returns ``(best_point, best_value, n_evaluated)``.
    """
    levels = max(len(s) for s in steps)
    steps = [s + [s[-1]] * (levels - len(s)) for s in steps]
    best, best_val, n_eval = None, np.inf, 0
    seen = {}
    for level in range(levels):
        grids = []
        for k, (lo, hi) in enumerate(axes):
            st = steps[k][level]
            if best is None:
                g = _axis(lo, hi, st)
            else:
                half = window * steps[k][level - 1]
                a = max(lo, best[k] - half)
                # stay on the lattice anchored at lo
                a = lo + st * np.ceil((a - lo) / st - 1e-9)
                g = _axis(a, min(hi, best[k] + half), st)
            grids.append(np.round(g, 10))
        for point in itertools.product(*grids):
            if point in seen:
                continue
            val = objective(point)
            seen[point] = val
            n_eval += 1
            if val < best_val or (val == best_val and best is not None and point < best):
                best, best_val = point, val
        if best is None:
            raise ConfigurationError("no feasible grid candidate")
    return best, best_val, n_eval


def _rng(rng_or_seed) -> np.random.Generator:
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return np.random.default_rng(rng_or_seed)


def calibrate_frechet(m: float, expert: ExpertQuantiles, mu_inf: float = 0.0,
                      grid: GridSpec = GridSpec(), is_cfg: ISConfig = ISConfig(),
                      rng=None) -> CalibrationResult:
    """Grid search of ``(x_e1, x_e2)`` minimizing Cooke's loss under ``mu_inf < x_e1 < x_e2``."""
    rng = _rng(rng)
    pred = FrechetPredictive(m, mu_inf, is_cfg, rng)
    lo, hi = grid.bounds(expert)
    lo = max(lo, mu_inf)
    target = np.array(expert.orders)

    def objective(point):
        x1, x2 = point
        if not (mu_inf < x1 < x2):
            return np.inf
        probs, _ = pred.cdf(expert.values, FrechetHyper(m, x1, x2, mu_inf), ess_warn=False)
        return cooke_loss(target, probs)

    (x1, x2), loss, n = _multires_search(objective, [(lo, hi), (lo, hi)], [grid.steps(), grid.steps()], grid.window)
    if not np.isfinite(loss):
        raise ConfigurationError("no Frechet candidate gives a finite loss")
    h = FrechetHyper(m, float(x1), float(x2), mu_inf)
    probs, ess = pred.cdf(expert.values, h)
    log.info("Frechet m=%g: x_e1=%.2f x_e2=%.2f loss=%.3g", m, x1, x2, loss)
    return CalibrationResult(h, tuple(float(p) for p in probs), float(loss), ess, n)


def calibrate_weibull(m: float, expert: ExpertQuantiles, grid: GridSpec = GridSpec(),
                      is_cfg: ISConfig = ISConfig(), rng=None) -> CalibrationResult:
    """Grid search of ``(x_e3, x_e4, rho)``, with rho on a log10 lattice."""
    rng = _rng(rng)
    pred = WeibullPredictive(m, is_cfg, rng)
    lo, hi = grid.bounds(expert)
    target = np.array(expert.orders)

    def objective(point):
        x3, x4, lr = point
        if not x3 < x4:
            return np.inf
        probs, _ = pred.cdf(expert.values, WeibullHyper(m, x3, x4, 10.0 ** lr), ess_warn=False)
        return cooke_loss(target, probs)

    axes = [(lo, hi), (lo, hi), (grid.log10_rho_lo, grid.log10_rho_hi)]
    steps = [grid.steps(), grid.steps(), grid.rho_steps()]
    (x3, x4, lr), loss, n = _multires_search(objective, axes, steps, grid.window)
    if not np.isfinite(loss):
        raise ConfigurationError("no Weibull candidate gives a finite loss")
    h = WeibullHyper(m, float(x3), float(x4), float(10.0 ** lr))
    probs, ess = pred.cdf(expert.values, h)
    log.info("Weibull m=%g: x_e3=%.2f x_e4=%.2f rho=%.2g loss=%.3g", m, x3, x4, h.rho, loss)
    return CalibrationResult(h, tuple(float(p) for p in probs), float(loss), ess, n)


# -- Gumbel ----------------------------------------------------------------


def gumbel_prior_predictive_cdf(x, h: GumbelHyper, n_nodes: int = 2001):
    """Prior predictive ``P(X <= x)`` by one-dimensional quadrature over ``w = 1 / sigma``.

    Given sigma, ``exp(mu / sigma)`` is Gamma(m, S) distributed, so
    ``P(X <= x | sigma) = (1 + exp(-x / sigma) / S)^(-m)`` in closed form.
    """
    grid = priors.gumbel_precision_grid(h, n_nodes)
    xs = np.atleast_1d(np.asarray(x, float))
    vals = np.array([priors.gumbel_conditional_cdf(xv, grid, h) @ grid.weights for xv in xs])
    return float(vals[0]) if np.ndim(x) == 0 else vals


def gumbel_prior_predictive_cdf_sir(x, h: GumbelHyper, rng=None, alpha: float = 100.0,
                                    n_proposals: int = 100_000):
    """Same quantity estimated from importance-weighted SIR proposals."""
    res = priors.sample_prior_gumbel(h, _rng(rng), alpha, n_proposals, size=1)
    xs = np.atleast_1d(np.asarray(x, float))
    with np.errstate(over="ignore"):
        vals = np.array([np.sum(res.weights * np.exp(-np.exp(-(xv - res.proposals_mu) / res.proposals_sigma)))
                         for xv in xs])
    return float(vals[0]) if np.ndim(x) == 0 else vals


GUMBEL_GRID = GridSpec(coarse_step=5.0)


def calibrate_gumbel_virtual(expert: ExpertQuantiles, grid: GridSpec = GUMBEL_GRID, m: int = 3,
                             n_nodes: int = 2001, mu_inf: Optional[float] = None) -> CalibrationResult:
    """Grid search over strictly increasing virtual samples of size ``m``.

    ``mu_inf`` truncates the Gumbel prior to ``mu >= mu_inf``.  The loss has a
    flat ridge along near-equal virtual points, hence the finer default
    coarse pass.
    """
    if m < 3:
        raise DomainError("Gumbel virtual size must be at least 3")
    lo, hi = grid.bounds(expert)
    target = np.array(expert.orders)

    def objective(point):
        if any(b <= a for a, b in zip(point, point[1:])):
            return np.inf
        probs = gumbel_prior_predictive_cdf(expert.values, GumbelHyper(point, mu_inf), n_nodes)
        return cooke_loss(target, probs)

    steps = [grid.steps()] * m
    point, loss, n = _multires_search(objective, [(lo, hi)] * m, steps, grid.window)
    if not np.isfinite(loss):
        raise ConfigurationError("no ordered virtual sample gives a finite loss")
    h = GumbelHyper(tuple(float(p) for p in point), mu_inf)
    probs = gumbel_prior_predictive_cdf(expert.values, h, n_nodes)
    log.info("Gumbel virtual data %s loss=%.3g", h.virtual_data, loss)
    return CalibrationResult(h, tuple(float(p) for p in probs), float(loss), None, n)


# -- compatibility ---------------------------------------------------------


def prior_predictive_sample(h, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draws of X from the prior predictive of any of the three priors."""
    e = rng.exponential(size=n)
    if isinstance(h, FrechetHyper):
        th = priors.sample_prior_frechet(h, rng, n)
        with np.errstate(over="ignore"):
            return th["mu"] + np.exp(-th["xi"] * (np.log(e) - th["log_nu"]))
    if isinstance(h, WeibullHyper):
        th = priors.sample_prior_weibull(h, rng, n)
        with np.errstate(over="ignore"):
            return th["mu"] - np.exp(th["xi"] * (np.log(e) - th["log_nu"]))
    if isinstance(h, GumbelHyper):
        th = priors.sample_prior_gumbel_exact(h, rng, n)
        return th.mu - th.sigma * np.log(e)
    raise DomainError(f"not a hyperparameter set: {h!r}")


def _kl_binned(p_s, q_s, inner, smoothing):
    """KL over the cells cut by the sorted ``inner`` edges (open-ended at both ends)."""
    k = inner.size + 1
    cp = np.bincount(np.searchsorted(inner, p_s, side="right"), minlength=k).astype(float)
    cq = np.bincount(np.searchsorted(inner, q_s, side="right"), minlength=k).astype(float)
    if not np.any((cp > 0) & (cq > 0)):
        return np.inf
    p = cp / cp.sum() + smoothing
    q = cq / cq.sum() + smoothing
    p, q = p / p.sum(), q / q.sum()
    return float(max(np.sum(p * np.log(p / q)), 0.0))


def _pooled_edges(p_s, q_s, bins):
    """Interior cut points: pooled quantiles of the finite draws."""
    pooled = np.concatenate([p_s, q_s])
    pooled = pooled[np.isfinite(pooled)]
    if pooled.size == 0:
        return np.empty(0)
    return np.unique(np.quantile(pooled, np.linspace(0.0, 1.0, bins + 1)[1:-1]))


def kl_marginal(sample_p, sample_q, bins: int = 512, smoothing: float = 1e-9) -> float:
    """Histogram estimate of ``KL(p | q) = int p log(p / q)`` from draws of p and q.

    Bin edges are the pooled-sample quantiles (equiprobable under the pooled
    law, open-ended at both ends).  KL is invariant under monotone maps of x,
    and quantile bins keep full resolution even when one predictive has a
    polynomial tail that would stretch an equal-width grid over a handful of
    occupied bins.
    """
    p_s = np.asarray(sample_p, float)
    q_s = np.asarray(sample_q, float)
    p_s, q_s = p_s[~np.isnan(p_s)], q_s[~np.isnan(q_s)]
    if p_s.size == 0 or q_s.size == 0:
        raise DomainError("empty sample")
    val = _kl_binned(p_s, q_s, _pooled_edges(p_s, q_s, bins), smoothing)
    if not np.isfinite(val):
        warnings.warn("marginal samples have disjoint supports", DiagnosticsWarning)
    return val


def kl_bootstrap_se(sample_p, sample_q, rng: np.random.Generator, n_boot: int = 20,
                    bins: int = 512, smoothing: float = 1e-9) -> float:
    """Bootstrap standard error of :func:`kl_marginal` (bin edges held fixed)."""
    p_s = np.asarray(sample_p, float)
    q_s = np.asarray(sample_q, float)
    edges = _pooled_edges(p_s, q_s, bins)
    reps = [_kl_binned(p_s[rng.integers(0, p_s.size, p_s.size)],
                       q_s[rng.integers(0, q_s.size, q_s.size)], edges, smoothing)
            for _ in range(n_boot)]
    reps = np.asarray(reps)
    return float(np.std(reps[np.isfinite(reps)], ddof=1)) if np.isfinite(reps).sum() > 1 else np.inf


@dataclass
class CompatibilityResult:
    m_star: float
    kl: Dict[float, float]
    kl_se: Dict[float, float] = field(default_factory=dict)
    m_argmin: Optional[float] = None

    def to_dict(self) -> dict:
        return {"m_star": self.m_star, "m_argmin": self.m_argmin,
                "kl": {str(k): v for k, v in self.kl.items()},
                "kl_se": {str(k): v for k, v in self.kl_se.items()}}


def _seed_of(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2 ** 63))
    return 0 if rng is None else int(rng)


def calibrate_virtual_size(model, gumbel_hyper: GumbelHyper,
                           calibrations: Dict[float, Union[CalibrationResult, FrechetHyper, WeibullHyper]],
                           rng=None, n_draws: int = 100_000, bins: int = 512,
                           tie_band: float = 2.0, n_boot: int = 20) -> CompatibilityResult:
    """Pick the virtual size whose prior predictive is closest (in KL) to the Gumbel one.

    Every candidate is simulated from the same random stream (common random
    numbers).  Candidates whose KL lies within ``tie_band`` bootstrap standard
    errors of the minimum are treated as tied, and the smallest such m wins;
    ``tie_band=0`` gives the plain argmin.
    """
    model = Model.parse(model)
    if model is Model.GUMBEL:
        raise DomainError("virtual-size balancing applies to Frechet and Weibull")
    if not calibrations:
        raise ConfigurationError("no calibrated candidates")
    if tie_band < 0:
        raise ConfigurationError("tie_band must be nonnegative")
    seed = _seed_of(rng)
    g_draws = prior_predictive_sample(gumbel_hyper, np.random.default_rng([seed, 0]), n_draws)
    kl, se = {}, {}
    for m in sorted(calibrations):
        h = calibrations[m]
        h = h.hyper if isinstance(h, CalibrationResult) else h
        if _model_of_hyper(h) is not model:
            raise DomainError(f"candidate m={m} is not a {model.value} prior")
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            draws = prior_predictive_sample(h, np.random.default_rng([seed, 1]), n_draws)
        kl[m] = kl_marginal(draws, g_draws, bins)
        se[m] = (kl_bootstrap_se(draws, g_draws, np.random.default_rng([seed, 2]), n_boot, bins)
                 if tie_band > 0 else 0.0)
        log.info("%s m=%g: KL to Gumbel %.4g (se %.2g)", model.value, m, kl[m], se[m])
    # min over sorted keys breaks exact ties toward the smaller m
    m_arg = min(sorted(kl), key=lambda k: kl[k])
    # band uses the standard error of the difference between two candidates
    tied = [k for k in sorted(kl) if kl[k] <= kl[m_arg] + tie_band * np.hypot(se[k], se[m_arg])]
    m_star = tied[0] if tie_band > 0 else m_arg
    return CompatibilityResult(m_star, kl, se, m_arg)
