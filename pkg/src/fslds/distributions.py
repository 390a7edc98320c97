"""Reparametrized samplers and log-densities.

All functions accept Tensors for the differentiable arguments (locations,
scales, samples) and plain arrays otherwise; see :mod:`fslds.autodiff`.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import lgamma, log, pi

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad

HALF_LOG_2PI = 0.5 * log(2.0 * pi)
# gates are kept inside [H_EPS, 1 - H_EPS]; LOGIT_MAX = logit(1 - H_EPS)
H_EPS = 1e-6
LOGIT_MAX = float(np.log1p(-H_EPS) - np.log(H_EPS))
RATE_FLOOR = 1e-8


@dataclass(frozen=True)
class BinConcreteParams:
    log_alpha: float
    phi: float

    def __post_init__(self):
        if not self.phi > 0:
            raise ValueError(f"temperature must be positive, got {self.phi}")
        if not np.isfinite(self.log_alpha):
            raise ValueError("log_alpha must be finite")


@dataclass(frozen=True)
class ConcreteParams:
    alphas: tuple
    phi: float

    def __post_init__(self):
        if not self.phi > 0:
            raise ValueError(f"temperature must be positive, got {self.phi}")
        if np.any(np.asarray(self.alphas) <= 0):
            raise ValueError("all alphas must be positive")


def logit(u):
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("uniform draw must lie strictly inside (0, 1)")
    return np.log(u) - np.log1p(-u)


def binconcrete_logit_sample(log_alpha, phi, u):
    """Logit of a Binary Concrete draw (unclipped)."""
    return (log_alpha + logit(u)) / phi


def gate_from_logit(x):
    """sigmoid(x) with the logit clipped so the gate stays in [H_EPS, 1 - H_EPS]."""
    return ad.sigmoid(ad.clip(x, -LOGIT_MAX, LOGIT_MAX))


def binconcrete_sample(log_alpha, phi, u):
    """h = sigmoid((log_alpha + logit(u)) / phi), differentiable in log_alpha."""
    return gate_from_logit(binconcrete_logit_sample(log_alpha, phi, u))


def binconcrete_logit_logpdf(x, log_alpha, phi):
    """Log-density of x = logit(h) when h ~ BinConcrete(alpha, phi)."""
    return np.log(phi) - phi * x + log_alpha - 2.0 * ad.softplus(log_alpha - phi * x)


def binconcrete_logpdf(h, log_alpha, phi):
    """Log-density of h in (0, 1) under BinConcrete(exp(log_alpha), phi).

    Evaluated through x = logit(h); the change of variables adds
    log(1/(h(1-h))) = softplus(x) + softplus(-x).
    """
    hv = np.asarray(ad.value(h))
    if np.any((hv <= 0) | (hv >= 1)):
        raise ValueError("h must lie strictly inside (0, 1)")
    if not np.all(np.asarray(ad.value(phi)) > 0):
        raise ValueError("temperature must be positive")
    x = ad.log(h) - ad.log(1.0 - h)
    return binconcrete_logit_logpdf(x, log_alpha, phi) + ad.softplus(x) + ad.softplus(-x)


def concrete_logpdf(p: ConcreteParams, x) -> float:
    """K-class Concrete log-density on the open simplex."""
    x = np.asarray(x, dtype=float)
    alphas = np.asarray(p.alphas, dtype=float)
    if x.shape != alphas.shape:
        raise ValueError(f"point has {x.shape} entries, alphas {alphas.shape}")
    if np.any(x <= 0) or abs(x.sum() - 1.0) > 1e-9:
        raise ValueError("x must be strictly positive and sum to one")
    K = x.size
    logs = np.log(alphas) - p.phi * np.log(x)
    lse = np.logaddexp.reduce(logs)
    return float(lgamma(K) + (K - 1) * log(p.phi)
                 + np.sum(np.log(alphas) - (p.phi + 1.0) * np.log(x)) - K * lse)


def normal_logpdf(x, mean, sigma):
    """Diagonal Gaussian log-density summed over all entries."""
    if not np.all(np.asarray(ad.value(sigma)) > 0):
        raise ValueError("sigma must be positive")
    n = np.size(ad.value(x))
    r = (x - mean) / sigma
    return -n * HALF_LOG_2PI - n * ad.log(sigma) - 0.5 * ad.sum(ad.square(r))


def normal_sample(mean, sigma, eps):
    return mean + sigma * eps


def poisson_logpmf(y, rate):
    """Sum of Poisson log-pmfs. Rates are floored at RATE_FLOOR before the log."""
    y = np.asarray(y)
    if np.any(y < 0):
        raise ValueError("counts must be non-negative")
    r = ad.clamp_min(rate, RATE_FLOOR)
    return ad.sum(y * ad.log(r) - r) - float(np.sum(gammaln(y + 1.0)))
