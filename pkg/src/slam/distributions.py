"""Densities, samplers, and link functions used by the latent hierarchy.

Conventions (fixed once, used everywhere):
  * gamma_logpdf is shape-rate: Ga(shape, rate) has mean shape/rate.
  * invgamma is shape-scale: IG(shape, scale) has mean scale/(shape-1)
    for shape > 1; this is the form in which the noise-variance Gibbs
    update is stated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, gammaln, ndtr, ndtri

from .errors import ParameterError

__all__ = [
    "GeneralBeta",
    "LinkFunction",
    "get_link",
    "gbeta_logpdf",
    "gbeta_sample",
    "gbeta_mean",
    "gbeta_var",
    "trunc_normal_sample",
    "trunc_normal_logpdf",
    "normal_logpdf",
    "gamma_logpdf",
    "invgamma_logpdf",
    "invgamma_sample",
]

_LOG_2PI = float(np.log(2.0 * np.pi))
_LINK_EPS = 1e-12
# Below this interval mass the truncated-normal proposal degrades to a
# uniform on (a, b); sampler and logpdf apply the same rule so the MH
# correction stays consistent.
_TN_MIN_MASS = 1e-12


def _check_gbeta(r, eta, a, b):
    r = np.asarray(r, dtype=float)
    eta = np.asarray(eta, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(~(r > 0) | ~(r < 1)):
        raise ParameterError(f"gbeta location must be in (0,1), got {r}")
    if np.any(~(eta > 0)):
        raise ParameterError(f"gbeta scale must be positive, got {eta}")
    if np.any(~(b > a)):
        raise ParameterError(f"gbeta support needs a < b, got ({a}, {b})")
    return r, eta, a if a.ndim else float(a), b if b.ndim else float(b)


def gbeta_logpdf(x, r, eta, a, b):
    """Log-density of the general beta on (a, b) with location r, scale eta.

    The variable is (b-a) X + a for X ~ Beta(r*eta, (1-r)*eta); points
    outside (a, b) get -inf rather than an error.
    """
    r, eta, a, b = _check_gbeta(r, eta, a, b)
    x = np.asarray(x, dtype=float)
    inside = (x > a) & (x < b)
    z = np.where(inside, (x - a) / (b - a), 0.5)
    s1 = r * eta
    s2 = (1.0 - r) * eta
    lp = (
        (s1 - 1.0) * np.log(z)
        + (s2 - 1.0) * np.log1p(-z)
        - betaln(s1, s2)
        - np.log(b - a)
    )
    out = np.where(inside, lp, -np.inf)
    return out if out.ndim else float(out)


def gbeta_sample(r, eta, a, b, rng: np.random.Generator, size=None):
    """Draw from the general beta by rescaling a standard beta draw."""
    r, eta, a, b = _check_gbeta(r, eta, a, b)
    x = rng.beta(r * eta, (1.0 - r) * eta, size=size)
    return a + (b - a) * x


def gbeta_mean(r, eta, a, b):
    """Prior mean (1-r) a + r b; does not depend on eta."""
    return (1.0 - r) * a + r * b


def gbeta_var(r, eta, a, b):
    """Prior variance (b-a)^2 r (1-r) / (1 + eta)."""
    return (b - a) ** 2 * r * (1.0 - r) / (1.0 + eta)


@dataclass(frozen=True)
class GeneralBeta:
    """Parameter bundle for one general-beta latency prior."""

    r: float
    eta: float
    a: float
    b: float

    def __post_init__(self):
        _check_gbeta(self.r, self.eta, self.a, self.b)

    def logpdf(self, x):
        return gbeta_logpdf(x, self.r, self.eta, self.a, self.b)

    def sample(self, rng, size=None):
        return gbeta_sample(self.r, self.eta, self.a, self.b, rng, size=size)

    @property
    def mean(self):
        return gbeta_mean(self.r, self.eta, self.a, self.b)

    @property
    def var(self):
        return gbeta_var(self.r, self.eta, self.a, self.b)


# ---------------------------------------------------------------------------
# Link functions


def _logit(r):
    return np.log(r) - np.log1p(-r)


def _logit_inv(v):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(v, dtype=float)))


def _probit(r):
    return ndtri(r)


def _probit_inv(v):
    return ndtr(v)


def _cloglog(r):
    return np.log(-np.log1p(-np.asarray(r, dtype=float)))


def _cloglog_inv(v):
    return -np.expm1(-np.exp(np.asarray(v, dtype=float)))


_LINKS = {
    "logit": (_logit, _logit_inv),
    "probit": (_probit, _probit_inv),
    "cloglog": (_cloglog, _cloglog_inv),
}


@dataclass(frozen=True)
class LinkFunction:
    """Strictly increasing bijection (0, 1) -> R with a clamped inverse."""

    kind: str

    def __post_init__(self):
        if self.kind not in _LINKS:
            raise ParameterError(
                f"unknown link {self.kind!r}; choose from {sorted(_LINKS)}"
            )

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if np.any(~(r > 0) | ~(r < 1)):
            raise ParameterError("link argument must lie in (0, 1)")
        out = _LINKS[self.kind][0](r)
        return out if out.ndim else float(out)

    def inverse(self, v):
        out = np.clip(_LINKS[self.kind][1](np.asarray(v, dtype=float)),
                      _LINK_EPS, 1.0 - _LINK_EPS)
        return out if out.ndim else float(out)


def get_link(kind: str) -> LinkFunction:
    return LinkFunction(kind)


# ---------------------------------------------------------------------------
# Truncated normal proposal


def _tn_mass_terms(mean, sd, a, b):
    alpha = (a - mean) / sd
    beta = (b - mean) / sd
    lo = ndtr(alpha)
    hi = ndtr(beta)
    return lo, hi - lo


def trunc_normal_sample(mean, sd, a, b, rng: np.random.Generator, size=None):
    """Draw from N(mean, sd^2) truncated to (a, b) by inverse CDF.

    All parameters broadcast. When the interval carries essentially no
    mass under the proposal (mean many sds outside (a, b)) the draw
    escalates to Uniform(a, b); trunc_normal_logpdf applies the
    identical rule.
    """
    sd = np.asarray(sd, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(~(sd > 0)) or np.any(~(b > a)):
        raise ParameterError("need sd > 0 and a < b")
    mean = np.asarray(mean, dtype=float)
    lo, mass = _tn_mass_terms(mean, sd, a, b)
    if size is None:
        size = np.broadcast_shapes(
            np.shape(mean), np.shape(sd), np.shape(a), np.shape(b)
        )
    u = rng.uniform(size=size)
    degenerate = mass < _TN_MIN_MASS
    with np.errstate(divide="ignore", invalid="ignore"):
        x = mean + sd * ndtri(lo + u * mass)
    x = np.where(degenerate, a + u * (b - a), x)
    # Inverse-CDF output can hit the boundary at float precision.
    x = np.clip(x, np.nextafter(a, b), np.nextafter(b, a))
    return x if np.ndim(x) else float(x)


def trunc_normal_logpdf(x, mean, sd, a, b):
    """Log-density of the truncated normal, normalized by interval mass."""
    sd = np.asarray(sd, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(~(sd > 0)) or np.any(~(b > a)):
        raise ParameterError("need sd > 0 and a < b")
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    _, mass = _tn_mass_terms(mean, sd, a, b)
    inside = (x > a) & (x < b)
    z = (x - mean) / sd
    with np.errstate(divide="ignore"):
        lp = -0.5 * z**2 - 0.5 * _LOG_2PI - np.log(sd) - np.log(mass)
    lp = np.where(mass < _TN_MIN_MASS, -np.log(b - a), lp)
    out = np.where(inside, lp, -np.inf)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Standard densities


def normal_logpdf(x, mean, sd):
    sd = np.asarray(sd, dtype=float)
    if np.any(~(sd > 0)):
        raise ParameterError("sd must be positive")
    z = (np.asarray(x, dtype=float) - mean) / sd
    out = -0.5 * z**2 - 0.5 * _LOG_2PI - np.log(sd)
    return out if out.ndim else float(out)


def gamma_logpdf(x, shape, rate):
    """Shape-rate gamma: mean shape/rate, mode (shape-1)/rate for shape >= 1."""
    if not (shape > 0 and rate > 0):
        raise ParameterError("gamma shape and rate must be positive")
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
    out = np.where(x > 0, lp, -np.inf)
    return out if out.ndim else float(out)


def invgamma_logpdf(x, shape, scale):
    """Shape-scale inverse gamma: mean scale/(shape-1) for shape > 1."""
    if not (shape > 0 and scale > 0):
        raise ParameterError("inverse-gamma shape and scale must be positive")
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = (
            shape * np.log(scale)
            - gammaln(shape)
            - (shape + 1.0) * np.log(x)
            - scale / x
        )
    out = np.where(x > 0, lp, -np.inf)
    return out if out.ndim else float(out)


def invgamma_sample(shape, scale, rng: np.random.Generator, size=None):
    """Draw X with 1/X ~ Ga(shape, rate=scale)."""
    if not (shape > 0 and scale > 0):
        raise ParameterError("inverse-gamma shape and scale must be positive")
    g = rng.standard_gamma(shape, size=size)
    return scale / g
