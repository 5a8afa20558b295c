"""Frechet, Weibull and Gumbel block-maxima laws.

Frechet and Weibull use the transformed scale ``nu = sigma ** (1 / xi)``::

    Frechet  P(X <= x) = exp(-nu * (x - mu) ** (-1 / xi)),   x > mu
    Weibull  P(X <= x) = exp(-nu * (mu - x) ** (1 / xi)),    x < mu
    Gumbel   P(X <= x) = exp(-exp(-(x - mu) / sigma))

Densities and likelihoods are returned on the log scale.  Data outside the
support give ``-inf`` rather than an exception so that samplers can reject
such states without special handling.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

import numpy as np

# Shapes outside this window overflow (.)**(+-1/xi); treated as outside support.
XI_MIN = 1e-4
XI_MAX = 1e3


class DomainError(ValueError):
    """Raised for invalid parameters or arguments outside a function's domain."""


class Model(str, enum.Enum):
    FRECHET = "frechet"
    WEIBULL = "weibull"
    GUMBEL = "gumbel"

    @classmethod
    def parse(cls, tag: Union[str, "Model"]) -> "Model":
        if isinstance(tag, Model):
            return tag
        try:
            return cls(str(tag).lower())
        except ValueError:
            raise DomainError(f"unknown model tag {tag!r}") from None

    @property
    def gev_sign(self) -> int:
        """Sign of the GEV shape parameter for this domain of attraction."""
        return {Model.FRECHET: 1, Model.WEIBULL: -1, Model.GUMBEL: 0}[self]


@dataclass(frozen=True)
class FrechetParams:
    mu: float
    nu: float
    xi: float

    def validate(self) -> None:
        if not (self.nu > 0 and self.xi > 0) or not np.isfinite(self.mu):
            raise DomainError(f"invalid Frechet parameters {self}")

    @property
    def sigma(self) -> float:
        return self.nu ** self.xi


@dataclass(frozen=True)
class WeibullParams:
    mu: float
    nu: float
    xi: float

    def validate(self) -> None:
        if not (self.nu > 0 and self.xi > 0) or not np.isfinite(self.mu):
            raise DomainError(f"invalid Weibull parameters {self}")

    @property
    def sigma(self) -> float:
        return self.nu ** (-self.xi)


@dataclass(frozen=True)
class GumbelParams:
    mu: float
    sigma: float

    def validate(self) -> None:
        if not self.sigma > 0 or not np.isfinite(self.mu):
            raise DomainError(f"invalid Gumbel parameters {self}")


DomainParams = Union[FrechetParams, WeibullParams, GumbelParams]

_PARAM_TYPES = {
    Model.FRECHET: FrechetParams,
    Model.WEIBULL: WeibullParams,
    Model.GUMBEL: GumbelParams,
}


def params_type(model) -> type:
    return _PARAM_TYPES[Model.parse(model)]


def model_of(p: DomainParams) -> Model:
    for model, cls in _PARAM_TYPES.items():
        if isinstance(p, cls):
            return model
    raise DomainError(f"not a parameter set: {p!r}")


def _check(model: Model, p: DomainParams) -> None:
    if not isinstance(p, _PARAM_TYPES[model]):
        raise DomainError(f"{model.value} model needs {_PARAM_TYPES[model].__name__}")
    p.validate()


def _out(x, value):
    return float(value) if np.ndim(x) == 0 else value


def frechet_cdf(x, p: FrechetParams):
    _check(Model.FRECHET, p)
    x = np.asarray(x, dtype=float)
    t = x - p.mu
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        val = np.exp(-p.nu * np.power(np.where(t > 0, t, 1.0), -1.0 / p.xi))
    return _out(x, np.where(t > 0, val, 0.0))


def weibull_cdf(x, p: WeibullParams):
    _check(Model.WEIBULL, p)
    x = np.asarray(x, dtype=float)
    t = p.mu - x
    with np.errstate(over="ignore"):
        val = np.exp(-p.nu * np.power(np.where(t > 0, t, 0.0), 1.0 / p.xi))
    return _out(x, np.where(t > 0, val, 1.0))


def gumbel_cdf(x, p: GumbelParams):
    _check(Model.GUMBEL, p)
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        val = np.exp(-np.exp(-(x - p.mu) / p.sigma))
    return _out(x, val)


_CDFS = {Model.FRECHET: frechet_cdf, Model.WEIBULL: weibull_cdf, Model.GUMBEL: gumbel_cdf}


def cdf(model, x, p: DomainParams):
    return _CDFS[Model.parse(model)](x, p)


def quantile(model, p: DomainParams, q):
    """Closed-form inverse of :func:`cdf` for ``0 < q < 1``."""
    model = Model.parse(model)
    _check(model, p)
    q = np.asarray(q, dtype=float)
    if np.any(~((q > 0) & (q < 1))):
        raise DomainError("quantile order must lie in (0, 1)")
    e = -np.log(q)
    if model is Model.FRECHET:
        val = p.mu + np.power(e / p.nu, -p.xi)
    elif model is Model.WEIBULL:
        val = p.mu - np.power(e / p.nu, p.xi)
    else:
        val = p.mu - p.sigma * np.log(e)
    return _out(q, val)


def sample(model, p: DomainParams, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. values by inverse-CDF sampling."""
    model = Model.parse(model)
    _check(model, p)
    if int(n) < 1:
        raise DomainError("sample size must be at least 1")
    # 1 - U avoids q == 0 exactly; q == 1 has probability zero in double precision
    u = 1.0 - rng.random(int(n))
    u = np.clip(u, np.finfo(float).tiny, np.nextafter(1.0, 0.0))
    return np.asarray(quantile(model, p, u))


def _shape_ok(xi: float) -> bool:
    return XI_MIN < xi < XI_MAX


def logpdf(model, x, p: DomainParams):
    """Pointwise log-density; ``-inf`` outside the support."""
    model = Model.parse(model)
    _check(model, p)
    x = np.asarray(x, dtype=float)
    if model is Model.GUMBEL:
        z = (x - p.mu) / p.sigma
        with np.errstate(over="ignore"):
            val = -np.log(p.sigma) - z - np.exp(-z)
        return _out(x, val)
    if not _shape_ok(p.xi):
        return _out(x, np.full(x.shape, -np.inf))
    t = x - p.mu if model is Model.FRECHET else p.mu - x
    inside = t > 0
    ts = np.where(inside, t, 1.0)
    logt = np.log(ts)
    a = -1.0 / p.xi if model is Model.FRECHET else 1.0 / p.xi
    with np.errstate(over="ignore"):
        val = np.log(p.nu) - np.log(p.xi) + (a - 1.0) * logt - p.nu * np.exp(a * logt)
    return _out(x, np.where(inside, val, -np.inf))


def loglik(model, data, p: DomainParams) -> float:
    """Sum of log-densities of ``data``; ``-inf`` when any point is outside the support."""
    data = np.asarray(data, dtype=float).ravel()
    if data.size == 0:
        model = Model.parse(model)
        _check(model, p)
        return 0.0
    val = float(np.sum(logpdf(model, data, p)))
    return val if not np.isnan(val) else -np.inf
