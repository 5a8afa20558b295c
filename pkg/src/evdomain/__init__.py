"""Bayesian selection of the extreme-value domain of attraction for block maxima.

The three candidate laws are Frechet (heavy upper tail), Weibull (bounded
upper tail) and Gumbel (light tail).  Priors are built from virtual data,
calibrated on expert predictive quantiles, balanced across models, and the
model choice is carried out by sampling an encompassing mixture.
"""

from evdomain.evd_core import (
    DomainError,
    FrechetParams,
    GumbelParams,
    Model,
    WeibullParams,
    cdf,
    frechet_cdf,
    gumbel_cdf,
    loglik,
    logpdf,
    quantile,
    sample,
    weibull_cdf,
)

__version__ = "0.1.0"

__all__ = [
    "DomainError",
    "FrechetParams",
    "GumbelParams",
    "Model",
    "WeibullParams",
    "cdf",
    "frechet_cdf",
    "gumbel_cdf",
    "loglik",
    "logpdf",
    "quantile",
    "sample",
    "weibull_cdf",
]
