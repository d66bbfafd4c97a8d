"""Derivative-constrained Gaussian process.

Conditioning a zero-mean GP on zero derivatives at the stationary points
t gives another GP whose moments are

    mean  = 0,
    cov   = k00(x, x) - k01(x, t) k11(t, t)^{-1} k10(t, x).

`conditional_moments` builds the dense form; `MarginalCache` provides the
numerically equivalent fast path used inside the sampler and the
hyperparameter objective, where the amplitude is parametrized against
the noise level (tau^2 = tau0^2 sigma^2) so that

    cov + sigma^2 I = sigma^2 (tau0^2 cov_unit + I) = sigma^2 A(t)

with A free of sigma^2. A is factored through a rank-M downdate of
B = tau0^2 k00_unit + I, so one O(n^3) factorization per hyperparameter
setting serves every stationary-point proposal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import DegenerateConditioningError, FactorizationError
from .kernel import DEFAULT_JITTER, KernelHyper, k00, k01, k11

__all__ = [
    "DgpConditional",
    "MarginalGaussian",
    "conditional_moments",
    "sample_path",
    "log_marginal",
    "posterior_path",
    "posterior_moments",
    "conditional_mean_at",
    "MarginalCache",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


def _chol_with_escalation(mat: np.ndarray, jitter: float, retries: int = 3):
    """Cholesky with bounded jitter escalation (x10 per retry).

    Returns (factor, jitter_used); raises FactorizationError after the
    final retry. A zero base jitter escalates from a floor tied to the
    matrix scale.
    """
    floor = max(jitter, 1e-12 * float(np.mean(np.abs(np.diag(mat)))), 1e-300)
    bump = jitter
    for attempt in range(retries + 1):
        try:
            if bump:
                L = np.linalg.cholesky(mat + bump * np.eye(mat.shape[0]))
            else:
                L = np.linalg.cholesky(mat)
            return L, bump
        except np.linalg.LinAlgError:
            bump = floor * (10.0**attempt)
    raise FactorizationError(
        f"factorization failed after jitter escalation to {bump:g}"
    )


def _check_separation(t: np.ndarray, min_sep: float):
    t = np.sort(np.asarray(t, dtype=float))
    if t.size < 2:
        return
    gaps = np.diff(t)
    j = int(np.argmin(gaps))
    if gaps[j] < min_sep:
        raise DegenerateConditioningError(
            f"stationary points {t[j]:.6g} and {t[j + 1]:.6g} are separated by "
            f"{gaps[j]:.3g} < {min_sep:.3g}"
        )


@dataclass
class DgpConditional:
    """Prior moments of the GP given zero derivatives at `stationary_points`."""

    grid: np.ndarray
    stationary_points: np.ndarray
    hyper: KernelHyper
    mean: np.ndarray
    cov: np.ndarray
    jitter: float
    _marginal_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.grid.size

    def marginal(self, sigma2: float) -> "MarginalGaussian":
        """Marginal of the data y = f + noise; factorization cached per sigma2."""
        key = float(sigma2)
        if key not in self._marginal_cache:
            self._marginal_cache[key] = MarginalGaussian(
                self.mean, self.cov + key * np.eye(self.n)
            )
        return self._marginal_cache[key]


class MarginalGaussian:
    """Dense multivariate normal with a cached Cholesky and log-determinant."""

    def __init__(self, mean: np.ndarray, cov: np.ndarray, jitter: float = 0.0):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        L, used = _chol_with_escalation(self.cov, jitter)
        self._L = L
        self.jitter = used
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(L))))

    def logpdf(self, y: np.ndarray) -> float:
        resid = np.asarray(y, dtype=float) - self.mean
        w = sla.solve_triangular(self._L, resid, lower=True)
        n = self.mean.size
        return float(-0.5 * (n * _LOG_2PI + self.logdet + w @ w))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return sla.cho_solve((self._L, True), np.asarray(rhs, dtype=float))


def conditional_moments(
    grid,
    t,
    hyper: KernelHyper,
    jitter: float = DEFAULT_JITTER,
    min_separation: float | None = None,
) -> DgpConditional:
    """Moments of the zero-mean GP conditioned on f'(t_m) = 0.

    `min_separation` (default 1e-3 of the grid span) guards the k11
    factorization; violations raise DegenerateConditioningError naming
    the offending pair. With the zero-mean prior the conditional mean is
    identically zero.
    """
    x = np.atleast_1d(np.asarray(grid, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    span = float(x[-1] - x[0]) if x.size > 1 else 1.0
    if min_separation is None:
        min_separation = 1e-3 * span
    _check_separation(t, min_separation)
    K00 = k00(x, x, hyper)
    K01 = k01(x, t, hyper)
    K11 = k11(t, t, hyper)
    scale11 = hyper.tau**2 / hyper.h**2
    try:
        L11, _ = _chol_with_escalation(K11, jitter * scale11)
    except FactorizationError as exc:
        raise DegenerateConditioningError(
            f"derivative covariance is singular for stationary points {t}: {exc}"
        ) from exc
    W = sla.cho_solve((L11, True), K01.T)
    cov = K00 - K01 @ W
    cov = 0.5 * (cov + cov.T)
    return DgpConditional(
        grid=x,
        stationary_points=t,
        hyper=hyper,
        mean=np.zeros(x.size),
        cov=cov,
        jitter=jitter * hyper.tau**2,
    )


def sample_path(
    conditional: DgpConditional, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw `count` prior realizations at the grid points; shape (count, n)."""
    if count == 0:
        return np.empty((0, conditional.n))
    L, _ = _chol_with_escalation(conditional.cov, conditional.jitter)
    z = rng.standard_normal((count, conditional.n))
    return conditional.mean[None, :] + z @ L.T


def log_marginal(y, conditional: DgpConditional, sigma2: float) -> float:
    """Exact Gaussian log-density of y under N(mean, cov + sigma2 I)."""
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    return conditional.marginal(sigma2).logpdf(y)


def posterior_moments(y, conditional: DgpConditional, sigma2: float):
    """Posterior mean and covariance of f at grid points given data y."""
    marg = conditional.marginal(sigma2)
    resid = np.asarray(y, dtype=float) - conditional.mean
    gain = conditional.cov @ marg.solve(np.eye(conditional.n))
    mean = conditional.mean + conditional.cov @ marg.solve(resid)
    cov = conditional.cov - gain @ conditional.cov
    return mean, 0.5 * (cov + cov.T)


def posterior_path(
    y, conditional: DgpConditional, sigma2: float, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw `count` realizations of f at grid points from its posterior."""
    if count == 0:
        return np.empty((0, conditional.n))
    mean, cov = posterior_moments(y, conditional, sigma2)
    L, _ = _chol_with_escalation(cov, conditional.jitter)
    z = rng.standard_normal((count, conditional.n))
    return mean[None, :] + z @ L.T


def conditional_mean_at(
    x_new, conditional: DgpConditional, values: np.ndarray
) -> np.ndarray:
    """Exact conditional mean of f at off-grid points given f(grid) = values.

    This is the smooth interpolant consistent with the constrained GP; it
    is what amplitude integrals evaluate instead of polynomial
    interpolation. `values` may be (n,) or (draws, n).
    """
    x_new = np.atleast_1d(np.asarray(x_new, dtype=float))
    t = conditional.stationary_points
    hyper = conditional.hyper
    K11 = k11(t, t, hyper)
    L11, _ = _chol_with_escalation(K11, conditional.jitter / hyper.h**2)
    cross = k00(x_new, conditional.grid, hyper) - k01(x_new, t, hyper) @ sla.cho_solve(
        (L11, True), k01(conditional.grid, t, hyper).T
    )
    Lg, _ = _chol_with_escalation(conditional.cov, conditional.jitter)
    vals = np.asarray(values, dtype=float)
    w = sla.cho_solve((Lg, True), vals.T if vals.ndim == 2 else vals)
    out = cross @ w
    return out.T if vals.ndim == 2 else out


class MarginalCache:
    """Shared fast path for marginal likelihood evaluations at fixed
    (tau0, h).

    With A(t) = tau0^2 (k00u - k01u k11u^{-1} k10u) + I (kernels at unit
    amplitude), the data marginal is N(0, sigma2 A). Writing
    A = B - V V' with B = tau0^2 k00u + I and V = tau0 k01u L11^{-T},
    Woodbury gives

        log|A|    = log|B| + log|S|,     S = I_M - V' B^{-1} V,
        y'A^{-1}y = y'B^{-1}y + u'S^{-1}u,  u = V'B^{-1}y,

    so each stationary-point proposal costs O(n^2 M) with no dense
    factorization.
    """

    def __init__(
        self,
        grid,
        tau0: float,
        h: float,
        jitter: float = DEFAULT_JITTER,
        min_separation: float | None = None,
    ):
        self.grid = np.atleast_1d(np.asarray(grid, dtype=float))
        self.tau0 = float(tau0)
        self.h = float(h)
        self.jitter = float(jitter)
        n = self.grid.size
        span = float(self.grid[-1] - self.grid[0]) if n > 1 else 1.0
        self.min_separation = (
            1e-3 * span if min_separation is None else float(min_separation)
        )
        unit = KernelHyper(tau=1.0, h=self.h)
        B = self.tau0**2 * k00(self.grid, self.grid, unit) + np.eye(n)
        LB, _ = _chol_with_escalation(B, 0.0, retries=0)
        self._Binv = sla.cho_solve((LB, True), np.eye(n))
        self.logdet_B = 2.0 * float(np.sum(np.log(np.diag(LB))))
        self._unit = unit
        self.n = n

    def prepare_series(self, y: np.ndarray) -> dict:
        """Per-series cache reused across proposals."""
        y = np.asarray(y, dtype=float)
        Biy = self._Binv @ y
        return {"y": y, "Biy": Biy, "yBy": float(y @ Biy)}

    def components(self, cache: dict, t) -> tuple[float, float] | None:
        """(log|A|, y'A^{-1}y) for stationary points t, or None when the
        configuration is numerically degenerate (callers treat that as a
        proposal rejection).

        Uses log|A| = log|B| + log|Kt - tau0^2 K01' B^{-1} K01| - log|Kt|
        with Kt the unit-amplitude derivative block, so only M x M
        determinants and solves remain per evaluation.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        M = t.size
        if M > 1 and np.min(np.diff(np.sort(t))) < self.min_separation:
            return None
        h2 = self.h * self.h
        tau0sq = self.tau0 * self.tau0
        d = self.grid[:, None] - t[None, :]
        K01 = np.exp(d * d * (-0.5 / h2)) * (d / h2)
        u = K01.T @ cache["Biy"]
        C = K01.T @ (self._Binv @ K01)
        diag = (1.0 + self.jitter) / h2
        if M == 1:
            st = diag - tau0sq * C[0, 0]
            if st <= 0.0:
                return None
            logdet = self.logdet_B + np.log(st) - np.log(diag)
            quad = cache["yBy"] + tau0sq * u[0] * u[0] / st
            return float(logdet), float(quad)
        if M == 2:
            dd = t[0] - t[1]
            off = np.exp(-0.5 * dd * dd / h2) * (1.0 / h2 - dd * dd / (h2 * h2))
            det_k = diag * diag - off * off
            s00 = diag - tau0sq * C[0, 0]
            s11 = diag - tau0sq * C[1, 1]
            s01 = off - tau0sq * C[0, 1]
            det_s = s00 * s11 - s01 * s01
            if det_k <= 0.0 or s00 <= 0.0 or det_s <= 0.0:
                return None
            logdet = self.logdet_B + np.log(det_s) - np.log(det_k)
            # explicit 2x2 solve of S w = u
            w0 = (s11 * u[0] - s01 * u[1]) / det_s
            w1 = (s00 * u[1] - s01 * u[0]) / det_s
            quad = cache["yBy"] + tau0sq * (u[0] * w0 + u[1] * w1)
            return float(logdet), float(quad)
        Kt = k11(t, t, KernelHyper(tau=1.0, h=self.h)) + (self.jitter / h2) * np.eye(M)
        St = Kt - tau0sq * C
        try:
            Lk = np.linalg.cholesky(Kt)
            Ls = np.linalg.cholesky(St)
        except np.linalg.LinAlgError:
            return None
        logdet = self.logdet_B + 2.0 * float(
            np.sum(np.log(np.diag(Ls))) - np.sum(np.log(np.diag(Lk)))
        )
        w = sla.cho_solve((Ls, True), u)
        quad = cache["yBy"] + tau0sq * float(u @ w)
        return float(logdet), float(quad)

    def loglik(self, cache: dict, t, sigma2: float) -> tuple[float, float, float] | None:
        """(log-likelihood, log|A|, y'A^{-1}y) of one series, or None."""
        parts = self.components(cache, t)
        if parts is None:
            return None
        logdet, quad = parts
        ll = -0.5 * (
            self.n * (_LOG_2PI + np.log(sigma2)) + logdet + quad / sigma2
        )
        return float(ll), logdet, quad

    def loglik_batch(self, cache: dict, T: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
        """Log-likelihoods for a batch of stationary-point vectors.

        T has shape (L, M), sigma2 (L,) or scalar; entries that hit a
        degenerate configuration come back -inf.
        """
        T = np.asarray(T, dtype=float)
        L, M = T.shape
        sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (L,))
        sep_ok = np.ones(L, dtype=bool)
        if M > 1:
            sep_ok = np.min(np.diff(np.sort(T, axis=1), axis=1), axis=1) >= (
                self.min_separation
            )
        d = self.grid[None, :, None] - T[:, None, :]
        h2 = self.h**2
        E = np.exp(-0.5 * d**2 / h2)
        K01u = E * d / h2
        dd = T[:, :, None] - T[:, None, :]
        K11u = np.exp(-0.5 * dd**2 / h2) * (1.0 / h2 - dd**2 / h2**2)
        K11u = K11u + (self.jitter / h2) * np.eye(M)[None, :, :]
        out = np.full(L, -np.inf)
        try:
            L11 = np.linalg.cholesky(K11u)
            ok = np.ones(L, dtype=bool)
        except np.linalg.LinAlgError:
            ok = np.array(
                [_is_chol_ok(K11u[i]) for i in range(L)], dtype=bool
            )
            L11 = np.linalg.cholesky(
                np.where(ok[:, None, None], K11u, np.eye(M)[None, :, :])
            )
        Z = np.linalg.solve(L11, np.transpose(K01u, (0, 2, 1)))
        V = self.tau0 * np.transpose(Z, (0, 2, 1))
        W = np.einsum("ij,ljm->lim", self._Binv, V)
        S = np.eye(M)[None, :, :] - np.einsum("lnm,lnk->lmk", V, W)
        try:
            LS = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            good = np.array([_is_chol_ok(S[i]) for i in range(L)], dtype=bool)
            ok &= good
            LS = np.linalg.cholesky(
                np.where(ok[:, None, None], S, np.eye(M)[None, :, :])
            )
        logdet = self.logdet_B + 2.0 * np.sum(
            np.log(np.diagonal(LS, axis1=1, axis2=2)), axis=1
        )
        u = np.einsum("lnm,n->lm", V, cache["Biy"])
        w = np.linalg.solve(LS, u[:, :, None])[:, :, 0]
        quad = cache["yBy"] + np.sum(w**2, axis=1)
        ll = -0.5 * (self.n * (_LOG_2PI + np.log(sigma2)) + logdet + quad / sigma2)
        ok &= sep_ok
        out[ok] = ll[ok]
        return out


def _is_chol_ok(mat: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(mat)
        return True
    except np.linalg.LinAlgError:
        return False
