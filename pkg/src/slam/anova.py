"""Latent regression mapping factor-effect coefficients to group-level
component locations through a link function.

The sampler always moves in coefficient space; locations r are derived
through the inverse link, never stored as free parameters. This keeps
the regression identifiable and the priors well-defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import FactorDesign, SearchWindows
from .distributions import LinkFunction, normal_logpdf
from .errors import ParameterError, ValidationError

__all__ = [
    "AnovaCoefficients",
    "GroupLocations",
    "locations_from_coefficients",
    "coefficient_logprior",
    "latency_time",
    "time_to_location",
]


@dataclass(frozen=True)
class AnovaCoefficients:
    """Intercepts (one per component) and effect coefficients.

    `effects` has shape (n_effects, M): one row per design column, one
    column per component.
    """

    intercepts: np.ndarray
    effects: np.ndarray

    def __post_init__(self):
        b0 = np.atleast_1d(np.asarray(self.intercepts, dtype=float))
        eff = np.asarray(self.effects, dtype=float)
        if eff.ndim == 1:
            eff = eff.reshape(-1, b0.size) if eff.size else eff.reshape(0, b0.size)
        if eff.ndim != 2 or (eff.size and eff.shape[1] != b0.size):
            raise ValidationError("effects must be (n_effects, M)")
        if not (np.all(np.isfinite(b0)) and np.all(np.isfinite(eff))):
            raise ValidationError("coefficients must be finite")
        object.__setattr__(self, "intercepts", b0)
        object.__setattr__(self, "effects", eff)

    @property
    def n_components(self) -> int:
        return self.intercepts.size

    @property
    def n_effects(self) -> int:
        return self.effects.shape[0]


@dataclass(frozen=True)
class GroupLocations:
    """Relative locations r in (0, 1) and their time-scale transform."""

    r: np.ndarray
    times: np.ndarray


def linear_predictor(coeffs: AnovaCoefficients, design: FactorDesign) -> np.ndarray:
    """(G, M) matrix of intercept + sum of encoded effects."""
    if design.n_effects != coeffs.n_effects:
        raise ValidationError(
            f"design has {design.n_effects} effect columns, "
            f"coefficients have {coeffs.n_effects}"
        )
    return coeffs.intercepts[None, :] + design.matrix @ coeffs.effects


def locations_from_coefficients(
    coeffs: AnovaCoefficients,
    design: FactorDesign,
    link: LinkFunction,
    windows: SearchWindows,
) -> GroupLocations:
    """Group-level locations r_g^m = link^{-1}(linear predictor) and the
    corresponding latencies (1-r) a^m + r b^m in grid units."""
    r = link.inverse(linear_predictor(coeffs, design))
    if r.shape[1] != windows.count:
        raise ValidationError(
            f"{windows.count} windows but {r.shape[1]} components in coefficients"
        )
    times = (1.0 - r) * windows.lower()[None, :] + r * windows.upper()[None, :]
    return GroupLocations(r=r, times=times)


def coefficient_logprior(
    coeffs: AnovaCoefficients,
    mu0,
    sd0,
    mu1,
    sd1,
) -> float:
    """Sum of independent normal log-densities over all coefficients.

    `mu0`/`sd0` apply to the intercepts, `mu1`/`sd1` to every effect;
    each may be scalar or per-component (intercepts) / matching the
    effects array.
    """
    lp = np.sum(normal_logpdf(coeffs.intercepts, mu0, sd0))
    if coeffs.effects.size:
        lp += np.sum(normal_logpdf(coeffs.effects, mu1, sd1))
    return float(lp)


def latency_time(r, window) -> float | np.ndarray:
    """Map a relative location r in (0,1) to the time scale of its window."""
    a, b = window
    r = np.asarray(r, dtype=float)
    if np.any(~(r > 0) | ~(r < 1)):
        raise ParameterError("relative location must lie in (0, 1)")
    out = (1.0 - r) * a + r * b
    return out if out.ndim else float(out)


def time_to_location(time, window) -> float | np.ndarray:
    """Inverse of latency_time; errors if time falls outside the window."""
    a, b = window
    time = np.asarray(time, dtype=float)
    if np.any((time <= a) | (time >= b)):
        raise ParameterError(f"time outside window ({a}, {b})")
    out = (time - a) / (b - a)
    return out if out.ndim else float(out)
