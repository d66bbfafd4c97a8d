"""Squared-exponential kernel and its derivative cross-covariance blocks.

k00 is the plain kernel; k01/k10 are covariances between function values
and derivative values; k11 is the derivative-derivative block. The
closed forms are validated against finite differences of k00 in the test
suite because the sign convention (derivative with respect to the first
versus second argument) is the classic bug source.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

__all__ = ["KernelHyper", "k00", "k01", "k10", "k11", "DEFAULT_JITTER"]

DEFAULT_JITTER = 1e-8


@dataclass(frozen=True)
class KernelHyper:
    """Amplitude and length scale, optionally tied to the noise level.

    When `tau0` is set, the amplitude is parametrized as tau^2 =
    tau0^2 * sigma^2; this is the form under which the noise-variance
    Gibbs step is exactly conjugate.
    """

    tau: float
    h: float
    tau0: float | None = None

    def __post_init__(self):
        if not (self.tau > 0 and np.isfinite(self.tau)):
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not (self.h > 0 and np.isfinite(self.h)):
            raise ParameterError(f"h must be positive, got {self.h}")
        if self.tau0 is not None and not (self.tau0 > 0 and np.isfinite(self.tau0)):
            raise ParameterError(f"tau0 must be positive, got {self.tau0}")

    @classmethod
    def from_noise_ratio(cls, tau0: float, h: float, sigma2: float) -> "KernelHyper":
        """Build hyperparameters with tau^2 = tau0^2 * sigma2."""
        if not sigma2 > 0:
            raise ParameterError(f"sigma2 must be positive, got {sigma2}")
        return cls(tau=float(tau0 * np.sqrt(sigma2)), h=float(h), tau0=float(tau0))


def _diff(x, y) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return x[:, None] - y[None, :]


def k00(x, x2, hyper: KernelHyper) -> np.ndarray:
    """Covariance of f between point sets: tau^2 exp(-(x-x')^2 / (2h^2))."""
    d = _diff(x, x2)
    return hyper.tau**2 * np.exp(-0.5 * (d / hyper.h) ** 2)


def k01(x, t, hyper: KernelHyper) -> np.ndarray:
    """Covariance of f(x_i) with f'(t_m): entry (i, m).

    Derivative of k00 with respect to its second argument, so the entry
    is tau^2 exp(-(x-t)^2/(2h^2)) (x-t)/h^2.
    """
    d = _diff(x, t)
    h2 = hyper.h**2
    return hyper.tau**2 * np.exp(-0.5 * d**2 / h2) * (d / h2)


def k10(t, x, hyper: KernelHyper) -> np.ndarray:
    """Covariance of f'(t_m) with f(x_i): the exact transpose of k01."""
    return k01(x, t, hyper).T


def k11(t, t2, hyper: KernelHyper) -> np.ndarray:
    """Covariance of f'(t_m) with f'(t'_m'): mixed second derivative of k00.

    Entry (m, m') is tau^2 exp(-d^2/(2h^2)) (1/h^2 - d^2/h^4) with
    d = t_m - t'_m'.
    """
    d = _diff(t, t2)
    h2 = hyper.h**2
    return hyper.tau**2 * np.exp(-0.5 * d**2 / h2) * (1.0 / h2 - d**2 / h2**2)
