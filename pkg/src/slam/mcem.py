"""Monte Carlo EM engine.

The E-step is a Metropolis-within-Gibbs sweep over the latent state:

  1. per-subject block update of the stationary points t (truncated
     normal random walk mixed with an occasional independent uniform,
     joint accept, asymmetric-proposal correction),
  2. random-walk updates of each intercept and effect coefficient,
  3. relative locations r recomputed through the inverse link,
  4. log-scale random-walk updates of each latency-prior scale eta
     (with Jacobian correction),
  5. a conjugate inverse-gamma draw of the noise variance sigma^2.

The M-step maximizes the summed log marginal likelihood of subsampled
(t, sigma^2) draws over (tau0, h) with Nelder-Mead in log space, where
the kernel amplitude is tied to the noise as tau^2 = tau0^2 sigma^2 --
the parametrization under which step 5 is exactly conjugate.

EM stops when the (log tau0, log h) update moves less than epsilon. In
the default "common" stream mode every E-step reuses the same random
numbers and starting state, which makes each EM update a deterministic
map of the current hyperparameters; the stopping rule then terminates
cleanly instead of rattling around at Monte Carlo noise level.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize
from scipy.special import betaln, ndtr, ndtri

from .anova import AnovaCoefficients, linear_predictor
from .blas import uses_single_threaded_blas
from .config import RunConfig
from .data_model import FactorDesign, SearchWindows, WaveformDataset, validate_dataset
from .dgp import MarginalCache
from .distributions import (
    _TN_MIN_MASS,
    gamma_logpdf,
    get_link,
    invgamma_sample,
    normal_logpdf,
)
from .errors import SlamError, ValidationError
from .inference import PosteriorChain
from .rng import substream

__all__ = [
    "LatentState",
    "ProposalScales",
    "AcceptanceStats",
    "EmIteration",
    "EmTrace",
    "SampleBatch",
    "MwgSampler",
    "FitResult",
    "estep_sample",
    "adapt_proposals",
    "mstep_optimize",
    "run_mcem",
]

logger = logging.getLogger(__name__)

_FAMILIES = ("t", "beta0", "beta", "eta")
_LOG_2PI = float(np.log(2.0 * np.pi))


def _t_propose(cur, sd, a, b, mix, rng):
    """Componentwise block proposal for the stationary points.

    Each coordinate draws from a mixture: truncated-normal random walk
    with probability 1-mix, independent Uniform(a, b) with probability
    mix. Returns (proposal, log q(cur|prop) - log q(prop|cur)); the
    Gaussian exponent is symmetric between directions, so only the
    interval-mass normalizations and the mixture weights matter. A
    vanishing truncated-normal mass degrades that component to the
    uniform, matching trunc_normal_sample.
    """
    width = b - a
    mass_c = ndtr((b - cur) / sd) - ndtr((a - cur) / sd)
    lo_c = ndtr((a - cur) / sd)
    take_uniform = rng.uniform(size=cur.size) < mix if mix > 0 else np.zeros(
        cur.size, dtype=bool
    )
    u = rng.uniform(size=cur.size)
    degen_c = mass_c < _TN_MIN_MASS
    with np.errstate(divide="ignore", invalid="ignore"):
        prop = cur + sd * ndtri(lo_c + u * mass_c)
    prop = np.where(take_uniform | degen_c, a + u * width, prop)
    prop = np.clip(prop, np.nextafter(a, b), np.nextafter(b, a))
    mass_p = ndtr((b - prop) / sd) - ndtr((a - prop) / sd)
    degen_p = mass_p < _TN_MIN_MASS
    z2 = ((prop - cur) / sd) ** 2
    base = -0.5 * z2 - np.log(sd) - 0.5 * _LOG_2PI
    log_unif = -np.log(width)
    with np.errstate(divide="ignore"):
        tn_fwd = np.where(degen_c, log_unif, base - np.log(mass_c))
        tn_bwd = np.where(degen_p, log_unif, base - np.log(mass_p))
    if mix > 0:
        log_fwd = np.logaddexp(np.log(mix) + log_unif, np.log1p(-mix) + tn_fwd)
        log_bwd = np.logaddexp(np.log(mix) + log_unif, np.log1p(-mix) + tn_bwd)
    else:
        log_fwd, log_bwd = tn_fwd, tn_bwd
    return prop, float(np.sum(log_bwd - log_fwd))


@dataclass(frozen=True)
class LatentState:
    """One configuration of the latent variables (t, beta, eta, sigma2)."""

    t: np.ndarray  # (n_series, M), canonical subject order
    coeffs: AnovaCoefficients
    eta: np.ndarray  # (G, M)
    sigma2: float
    r: np.ndarray  # (G, M), derived through the inverse link

    def __post_init__(self):
        if not np.all(np.asarray(self.eta) > 0):
            raise ValidationError("eta values must be positive")
        if not self.sigma2 > 0:
            raise ValidationError("sigma2 must be positive")


@dataclass
class ProposalScales:
    """Tuning standard deviations for every Metropolis proposal."""

    t: np.ndarray  # (n_series, M)
    beta0: np.ndarray  # (M,)
    beta: np.ndarray  # (p, M)
    eta: np.ndarray  # (G, M), log-scale steps

    def copy(self) -> "ProposalScales":
        return ProposalScales(
            self.t.copy(), self.beta0.copy(), self.beta.copy(), self.eta.copy()
        )


@dataclass
class AcceptanceStats:
    """Accept/propose counters, total and per adaptation window."""

    accepted: dict = field(default_factory=lambda: {f: 0 for f in _FAMILIES})
    proposed: dict = field(default_factory=lambda: {f: 0 for f in _FAMILIES})
    window_accepted: dict = field(default_factory=dict)
    window_proposed: dict = field(default_factory=dict)
    t_accepted: np.ndarray | None = None
    t_proposed: np.ndarray | None = None
    t_window_accepted: np.ndarray | None = None
    t_window_proposed: np.ndarray | None = None

    def rates(self) -> dict:
        return {
            f: (self.accepted[f] / self.proposed[f]) if self.proposed[f] else float("nan")
            for f in _FAMILIES
        }

    def reset_window(self):
        self.window_accepted = {f: 0 for f in _FAMILIES}
        self.window_proposed = {f: 0 for f in _FAMILIES}
        if self.t_window_accepted is not None:
            self.t_window_accepted[:] = 0
            self.t_window_proposed[:] = 0


@dataclass
class SampleBatch:
    """Retained draws from one sampling run, stacked into arrays."""

    t: np.ndarray  # (D, n_series, M)
    beta0: np.ndarray  # (D, M)
    beta: np.ndarray  # (D, p, M)
    eta: np.ndarray  # (D, G, M)
    sigma2: np.ndarray  # (D,)
    r: np.ndarray  # (D, G, M)

    def __len__(self) -> int:
        return self.sigma2.size

    def state(self, d: int) -> LatentState:
        return LatentState(
            t=self.t[d],
            coeffs=AnovaCoefficients(self.beta0[d], self.beta[d]),
            eta=self.eta[d],
            sigma2=float(self.sigma2[d]),
            r=self.r[d],
        )

    def states(self):
        return [self.state(d) for d in range(len(self))]


@dataclass
class EmIteration:
    index: int
    tau0: float
    h: float
    objective: float
    delta: float
    accept: dict
    mstep_flag: str
    raw_move: float = 0.0
    step_size: float = 1.0


@dataclass
class EmTrace:
    iterations: list = field(default_factory=list)
    converged: bool = False
    warning: str | None = None

    def deltas(self) -> np.ndarray:
        return np.array([it.delta for it in self.iterations])

    def thetas(self) -> np.ndarray:
        return np.array([[it.tau0, it.h] for it in self.iterations])


@dataclass
class FitResult:
    tau0: float
    h: float
    trace: EmTrace
    chains: list
    config: RunConfig
    scales: ProposalScales


def adapt_proposals(
    stats: AcceptanceStats,
    scales: ProposalScales,
    *,
    band_t=(0.25, 0.45),
    band_beta=(0.20, 0.40),
    band_eta=(0.20, 0.40),
    factor: float = 1.25,
    frozen: bool = False,
) -> ProposalScales:
    """Nudge proposal scales whose windowed acceptance left its band.

    Too-high acceptance widens the proposal (x factor), too-low shrinks
    it (/ factor). After burn-in the call is the identity so the final
    chain is a fixed Markov kernel. Window counters reset on every call.
    """
    if frozen:
        stats.reset_window()
        return scales
    out = scales.copy()
    if stats.t_window_proposed is not None and stats.t_window_proposed.sum():
        prop = np.maximum(stats.t_window_proposed, 1)
        rate = stats.t_window_accepted / prop
        out.t[rate > band_t[1], :] *= factor
        out.t[rate < band_t[0], :] /= factor
    for family, arr, band in (
        ("beta0", out.beta0, band_beta),
        ("beta", out.beta, band_beta),
        ("eta", out.eta, band_eta),
    ):
        proposed = stats.window_proposed.get(family, 0)
        if not proposed:
            continue
        rate = stats.window_accepted.get(family, 0) / proposed
        if rate > band[1]:
            arr *= factor
        elif rate < band[0]:
            arr /= factor
    stats.reset_window()
    return out


class _Streams:
    """Named per-component generators for one sampling run."""

    def __init__(self, seed: int, context: tuple, n_series: int):
        self.t = [substream(seed, "t", *context, j) for j in range(n_series)]
        self.beta = substream(seed, "beta", *context)
        self.eta = substream(seed, "eta", *context)
        self.sigma2 = substream(seed, "sigma2", *context)
        self.init = [substream(seed, "init", *context, j) for j in range(n_series)]
        self.misc = substream(seed, "misc", *context)


class MwgSampler:
    """Metropolis-within-Gibbs sampler bound to one dataset and design.

    The sampler holds immutable problem data plus the kernel
    hyperparameters currently in force; `set_theta` re-binds the fast
    marginal cache when the M-step updates them.
    """

    def __init__(
        self,
        dataset: WaveformDataset,
        windows: SearchWindows,
        design: FactorDesign,
        config: RunConfig,
    ):
        if windows.count < 1:
            raise ValidationError("at least one window required")
        self.dataset = dataset
        self.windows = windows
        self.design = design
        self.config = config
        self.link = get_link(config.link)
        self.priors = config.priors
        self.M = windows.count
        self.G = dataset.n_groups
        self.subjects = dataset.subject_index()
        self.n_series = len(self.subjects)
        self.group_of = np.array([g for g, _ in self.subjects])
        self.counts = np.array(dataset.subjects_per_group, dtype=float)
        self.ys = [dataset.series(g, s) for g, s in self.subjects]
        self.a = windows.lower()
        self.b = windows.upper()
        self.n = dataset.grid.n
        self.use_likelihood = True
        self.update_families = {"t", "beta0", "beta", "eta", "sigma2"}
        self._cache = None
        self._series_cache = None
        self.tau0 = None
        self.h = None

    # -- hyperparameter binding -------------------------------------------

    def set_theta(self, tau0: float, h: float) -> None:
        self._cache = MarginalCache(
            self.dataset.grid.points,
            tau0=tau0,
            h=h,
            jitter=self.config.jitter,
            min_separation=self.config.min_separation,
        )
        self._series_cache = [self._cache.prepare_series(y) for y in self.ys]
        self.tau0 = float(tau0)
        self.h = float(h)

    # -- state helpers ------------------------------------------------------

    def init_state(self, streams: _Streams) -> dict:
        """Initial latent configuration: t uniform in its window, all
        coefficients at init_beta, eta and sigma2 at their config values."""
        c = self.config
        t = np.empty((self.n_series, self.M))
        for j in range(self.n_series):
            u = streams.init[j].uniform(size=self.M)
            t[j] = self.a + u * (self.b - self.a)
        beta0 = np.full(self.M, float(c.init_beta))
        beta = np.full((self.design.n_effects, self.M), float(c.init_beta))
        eta_val = c.eta_fixed if c.eta_fixed is not None else c.init_eta
        eta = np.full((self.G, self.M), float(eta_val))
        state = {
            "t": t,
            "beta0": beta0,
            "beta": beta,
            "eta": eta,
            "sigma2": float(c.init_sigma2),
        }
        self._sync_r(state)
        return state

    def initial_state(self, seed: int = 0) -> dict:
        """Fresh initial state with likelihood caches attached."""
        streams = _Streams(seed, ("init",), self.n_series)
        state = self.init_state(streams)
        self._refresh_likelihood(state)
        return state

    def initial_scales(self) -> ProposalScales:
        width = self.b - self.a
        return ProposalScales(
            t=np.tile(0.1 * width, (self.n_series, 1)),
            beta0=np.full(self.M, 0.3),
            beta=np.full((self.design.n_effects, self.M), 0.3),
            eta=np.full((self.G, self.M), 0.5),
        )

    def _sync_r(self, state: dict) -> None:
        coeffs = AnovaCoefficients(state["beta0"], state["beta"])
        state["r"] = self.link.inverse(linear_predictor(coeffs, self.design))

    def _refresh_likelihood(self, state: dict) -> None:
        """Recompute per-series (logdet A, y'A^{-1}y) at the current t."""
        logdet = np.zeros(self.n_series)
        quad = np.zeros(self.n_series)
        if self.use_likelihood:
            for j in range(self.n_series):
                parts = self._cache.components(self._series_cache[j], state["t"][j])
                if parts is None:
                    raise SlamError(
                        f"initial stationary points for series {j} are degenerate"
                    )
                logdet[j], quad[j] = parts
        state["logdet"] = logdet
        state["quad"] = quad
        z = (state["t"] - self.a[None, :]) / (self.b - self.a)[None, :]
        state["logz"] = np.log(z)
        state["log1mz"] = np.log1p(-z)

    def snapshot(self, state: dict) -> LatentState:
        return LatentState(
            t=state["t"].copy(),
            coeffs=AnovaCoefficients(state["beta0"].copy(), state["beta"].copy()),
            eta=state["eta"].copy(),
            sigma2=float(state["sigma2"]),
            r=state["r"].copy(),
        )

    # -- sweep --------------------------------------------------------------
    #
    # The latency-prior normalization (betaln and the log window width)
    # cancels in the t-update ratio because r and eta are held fixed
    # there; the beta and eta updates work from cached per-group sums of
    # log z and log(1-z), which only change when a t proposal is
    # accepted.

    def _update_t(self, state, streams, scales, stats) -> None:
        s1 = state["r"] * state["eta"]  # (G, M)
        s2 = (1.0 - state["r"]) * state["eta"]
        width = self.b - self.a
        s2sig = state["sigma2"]
        ll_const = self.n * (_LOG_2PI + np.log(s2sig))
        mix = self.config.t_uniform_mix
        for j in range(self.n_series):
            rng = streams.t[j]
            g = self.group_of[j]
            cur = state["t"][j]
            prop, log_q_corr = _t_propose(cur, scales.t[j], self.a, self.b, mix, rng)
            # Draw the acceptance uniform unconditionally so the stream
            # stays aligned whether or not the proposal is degenerate.
            u = rng.uniform()
            stats.proposed["t"] += 1
            stats.t_proposed[j] += 1
            stats.window_proposed["t"] = stats.window_proposed.get("t", 0) + 1
            stats.t_window_proposed[j] += 1
            if self.use_likelihood:
                parts = self._cache.components(self._series_cache[j], prop)
                if parts is None:
                    continue
                logdet_new, quad_new = parts
                ll_delta = -0.5 * (
                    logdet_new
                    - state["logdet"][j]
                    + (quad_new - state["quad"][j]) / s2sig
                )
            else:
                logdet_new = quad_new = 0.0
                ll_delta = 0.0
            z = (prop - self.a) / width
            logz_new = np.log(z)
            log1mz_new = np.log1p(-z)
            prior_delta = float(
                np.sum(
                    (s1[g] - 1.0) * (logz_new - state["logz"][j])
                    + (s2[g] - 1.0) * (log1mz_new - state["log1mz"][j])
                )
            )
            log_ratio = ll_delta + prior_delta + log_q_corr
            if not np.isfinite(log_ratio):
                if log_ratio > 0:
                    raise SlamError("non-finite acceptance ratio in t update")
                continue
            if np.log(u) < log_ratio:
                state["t"][j] = prop
                state["logdet"][j] = logdet_new
                state["quad"][j] = quad_new
                state["logz"][j] = logz_new
                state["log1mz"][j] = log1mz_new
                stats.accepted["t"] += 1
                stats.t_accepted[j] += 1
                stats.window_accepted["t"] = stats.window_accepted.get("t", 0) + 1
                stats.t_window_accepted[j] += 1

    def _group_sums(self, state):
        """Per-(group, component) sums of cached log z and log(1-z)."""
        slz = np.empty((self.G, self.M))
        sl1z = np.empty((self.G, self.M))
        for g in range(self.G):
            mask = self.group_of == g
            slz[g] = state["logz"][mask].sum(axis=0)
            sl1z[g] = state["log1mz"][mask].sum(axis=0)
        return slz, sl1z

    def _component_prior_sum(self, r_col, eta_col, slz_m, sl1z_m) -> float:
        """Sum over groups of the latency prior for one component, up to
        terms constant in (r, eta)."""
        s1 = r_col * eta_col
        s2 = (1.0 - r_col) * eta_col
        return float(
            np.sum(
                (s1 - 1.0) * slz_m
                + (s2 - 1.0) * sl1z_m
                - self.counts * betaln(s1, s2)
            )
        )

    def _update_beta(self, state, streams, scales, stats) -> None:
        pri = self.priors
        Z = self.design.matrix
        slz, sl1z = self._group_sums(state)
        for m in range(self.M):
            eta_m = state["eta"][:, m]
            cur = state["beta0"][m]
            prop = cur + scales.beta0[m] * streams.beta.standard_normal()
            u = streams.beta.uniform()
            stats.proposed["beta0"] += 1
            stats.window_proposed["beta0"] = stats.window_proposed.get("beta0", 0) + 1
            linpred_eff = Z @ state["beta"][:, m]
            r_new = self.link.inverse(prop + linpred_eff)
            delta = (
                self._component_prior_sum(r_new, eta_m, slz[:, m], sl1z[:, m])
                - self._component_prior_sum(
                    state["r"][:, m], eta_m, slz[:, m], sl1z[:, m]
                )
                + float(normal_logpdf(prop, pri.mu0, pri.sd0))
                - float(normal_logpdf(cur, pri.mu0, pri.sd0))
            )
            if np.log(u) < delta:
                state["beta0"][m] = prop
                state["r"][:, m] = r_new
                stats.accepted["beta0"] += 1
                stats.window_accepted["beta0"] = (
                    stats.window_accepted.get("beta0", 0) + 1
                )
            for aidx in range(self.design.n_effects):
                cur_a = state["beta"][aidx, m]
                prop_a = cur_a + scales.beta[aidx, m] * streams.beta.standard_normal()
                u = streams.beta.uniform()
                stats.proposed["beta"] += 1
                stats.window_proposed["beta"] = stats.window_proposed.get("beta", 0) + 1
                beta_col = state["beta"][:, m].copy()
                beta_col[aidx] = prop_a
                r_new = self.link.inverse(state["beta0"][m] + Z @ beta_col)
                delta = (
                    self._component_prior_sum(r_new, eta_m, slz[:, m], sl1z[:, m])
                    - self._component_prior_sum(
                        state["r"][:, m], eta_m, slz[:, m], sl1z[:, m]
                    )
                    + float(normal_logpdf(prop_a, pri.mu1, pri.sd1))
                    - float(normal_logpdf(cur_a, pri.mu1, pri.sd1))
                )
                if np.log(u) < delta:
                    state["beta"][aidx, m] = prop_a
                    state["r"][:, m] = r_new
                    stats.accepted["beta"] += 1
                    stats.window_accepted["beta"] = (
                        stats.window_accepted.get("beta", 0) + 1
                    )

    def _update_eta(self, state, streams, scales, stats) -> None:
        pri = self.priors
        slz, sl1z = self._group_sums(state)
        for g in range(self.G):
            for m in range(self.M):
                cur = state["eta"][g, m]
                step = scales.eta[g, m] * streams.eta.standard_normal()
                u = streams.eta.uniform()
                prop = float(np.exp(np.log(cur) + step))
                stats.proposed["eta"] += 1
                stats.window_proposed["eta"] = stats.window_proposed.get("eta", 0) + 1
                r_gm = state["r"][g, m]
                s1n, s2n = r_gm * prop, (1.0 - r_gm) * prop
                s1c, s2c = r_gm * cur, (1.0 - r_gm) * cur
                delta = (
                    (s1n - s1c) * slz[g, m]
                    + (s2n - s2c) * sl1z[g, m]
                    - self.counts[g] * (betaln(s1n, s2n) - betaln(s1c, s2c))
                    + float(gamma_logpdf(prop, pri.alpha_eta, pri.beta_eta))
                    - float(gamma_logpdf(cur, pri.alpha_eta, pri.beta_eta))
                    + np.log(prop)
                    - np.log(cur)  # Jacobian of the log-scale walk
                )
                if np.log(u) < delta:
                    state["eta"][g, m] = prop
                    stats.accepted["eta"] += 1
                    stats.window_accepted["eta"] = (
                        stats.window_accepted.get("eta", 0) + 1
                    )

    def sigma2_conditional(self, state) -> tuple[float, float]:
        """(shape, scale) of the conjugate inverse-gamma noise update:
        shape n/2 * total series count + alpha, scale half the summed
        whitened quadratic forms plus beta."""
        pri = self.priors
        if not self.use_likelihood:
            return pri.alpha_sigma, pri.beta_sigma
        shape = 0.5 * self.n * self.n_series + pri.alpha_sigma
        scale = 0.5 * float(np.sum(state["quad"])) + pri.beta_sigma
        return shape, scale

    def _update_sigma2(self, state, streams) -> None:
        shape, scale = self.sigma2_conditional(state)
        state["sigma2"] = float(invgamma_sample(shape, scale, streams.sigma2))

    def sweep(self, state, streams, scales, stats) -> None:
        if "t" in self.update_families:
            self._update_t(state, streams, scales, stats)
        if {"beta0", "beta"} & self.update_families:
            self._update_beta(state, streams, scales, stats)
        if "eta" in self.update_families and self.config.eta_fixed is None:
            self._update_eta(state, streams, scales, stats)
        if "sigma2" in self.update_families:
            self._update_sigma2(state, streams)

    # -- runs -----------------------------------------------------------------

    @uses_single_threaded_blas
    def run(
        self,
        state: dict,
        scales: ProposalScales,
        streams: _Streams,
        *,
        total: int,
        burnin: int,
        thin: int = 1,
        adapt: bool = True,
        draw_callback=None,
    ) -> tuple[SampleBatch, AcceptanceStats, dict, ProposalScales]:
        """Run `total` sweeps; keep every `thin`-th after `burnin`.

        Proposal adaptation happens every `adapt_every` sweeps during
        burn-in (if `adapt`), then freezes. Returns the retained batch,
        acceptance statistics, the final state, and the (possibly
        adapted) scales.
        """
        if self._cache is None and self.use_likelihood:
            raise SlamError("set_theta must be called before run()")
        c = self.config
        stats = AcceptanceStats(
            t_accepted=np.zeros(self.n_series, dtype=int),
            t_proposed=np.zeros(self.n_series, dtype=int),
            t_window_accepted=np.zeros(self.n_series, dtype=int),
            t_window_proposed=np.zeros(self.n_series, dtype=int),
        )
        stats.reset_window()
        self._refresh_likelihood(state)
        keep = (total - burnin + thin - 1) // thin
        p = self.design.n_effects
        batch = SampleBatch(
            t=np.empty((keep, self.n_series, self.M)),
            beta0=np.empty((keep, self.M)),
            beta=np.empty((keep, p, self.M)),
            eta=np.empty((keep, self.G, self.M)),
            sigma2=np.empty(keep),
            r=np.empty((keep, self.G, self.M)),
        )
        kept = 0
        for sweep_idx in range(total):
            self.sweep(state, streams, scales, stats)
            in_burnin = sweep_idx < burnin
            if adapt and in_burnin and (sweep_idx + 1) % c.adapt_every == 0:
                scales = adapt_proposals(
                    stats,
                    scales,
                    band_t=c.accept_band_t,
                    band_beta=c.accept_band_beta,
                    band_eta=c.accept_band_eta,
                    factor=c.adapt_factor,
                )
                width = self.b - self.a
                np.clip(scales.t, 1e-3 * width, width, out=scales.t)
                np.clip(scales.beta0, 1e-3, 100.0, out=scales.beta0)
                np.clip(scales.beta, 1e-3, 100.0, out=scales.beta)
                np.clip(scales.eta, 1e-3, 100.0, out=scales.eta)
            if not in_burnin and (sweep_idx - burnin) % thin == 0:
                batch.t[kept] = state["t"]
                batch.beta0[kept] = state["beta0"]
                batch.beta[kept] = state["beta"]
                batch.eta[kept] = state["eta"]
                batch.sigma2[kept] = state["sigma2"]
                batch.r[kept] = state["r"]
                if draw_callback is not None:
                    draw_callback(kept, batch.state(kept))
                kept += 1
        assert kept == keep
        return batch, stats, state, scales


def estep_sample(
    dataset: WaveformDataset,
    windows: SearchWindows,
    design: FactorDesign,
    state_init: LatentState | None,
    tau0: float,
    h: float,
    draws: int,
    seed: int,
    *,
    config: RunConfig | None = None,
    burnin: int = 0,
    context: tuple = ("estep",),
    use_likelihood: bool = True,
    update_families=("t", "beta0", "beta", "eta", "sigma2"),
    scales: ProposalScales | None = None,
    adapt: bool = True,
) -> tuple[SampleBatch, AcceptanceStats]:
    """One Monte Carlo E-step: `draws` retained sweeps after `burnin`.

    Exposed primarily for testing single E-steps in isolation;
    `run_mcem` drives the full loop.
    """
    config = config or RunConfig(windows=windows.bounds)
    sampler = MwgSampler(dataset, windows, design, config)
    sampler.use_likelihood = use_likelihood
    sampler.update_families = set(update_families)
    if use_likelihood:
        sampler.set_theta(tau0, h)
    streams = _Streams(seed, context, sampler.n_series)
    if state_init is None:
        state = sampler.init_state(streams)
    else:
        state = {
            "t": state_init.t.copy(),
            "beta0": state_init.coeffs.intercepts.copy(),
            "beta": state_init.coeffs.effects.copy(),
            "eta": state_init.eta.copy(),
            "sigma2": float(state_init.sigma2),
        }
        sampler._sync_r(state)
    scales = scales or sampler.initial_scales()
    batch, stats, _, _ = sampler.run(
        state,
        scales,
        streams,
        total=burnin + draws,
        burnin=burnin,
        thin=1,
        adapt=adapt,
    )
    return batch, stats


class _MStepObjective:
    """Negative summed log marginal likelihood over subsampled draws.

    Every (draw, subject) pair is flattened into one batch so the n x n
    solve is a single matrix product per evaluation; the M x M algebra
    is explicit for M <= 2 and batched Cholesky otherwise.
    """

    def __init__(self, dataset, t_draws, sigma2_draws, jitter, min_separation):
        self.grid = dataset.grid.points
        self.n = self.grid.size
        T = np.asarray(t_draws, dtype=float)  # (L, n_series, M)
        self.L, self.n_series, self.M = T.shape
        self.flatT = T.reshape(self.L * self.n_series, self.M)
        self.sig_flat = np.repeat(np.asarray(sigma2_draws, dtype=float), self.n_series)
        self.Y = np.vstack([dataset.series(g, s) for g, s in dataset.subject_index()])
        self.jitter = jitter
        span = float(self.grid[-1] - self.grid[0])
        min_sep = 1e-3 * span if min_separation is None else float(min_separation)
        if self.M > 1:
            gaps = np.min(np.diff(np.sort(self.flatT, axis=1), axis=1), axis=1)
            self.sep_ok = bool(np.all(gaps >= min_sep))
        else:
            self.sep_ok = True
        self.D2 = (self.grid[:, None] - self.grid[None, :]) ** 2
        self.subj_of = np.tile(np.arange(self.n_series), self.L)
        # (batch, n, M) grid-to-point differences are theta-independent.
        self.d = self.grid[None, :, None] - self.flatT[:, None, :]
        self.d2 = self.d * self.d
        self.evaluations = 0

    def __call__(self, log_theta) -> float:
        self.evaluations += 1
        tau0, h = np.exp(log_theta)
        if not (np.isfinite(tau0) and np.isfinite(h) and tau0 > 0 and h > 0):
            return 1e300
        if not self.sep_ok:
            return 1e300
        n = self.n
        h2 = h * h
        tau0sq = tau0 * tau0
        B = tau0sq * np.exp(-0.5 * self.D2 / h2) + np.eye(n)
        try:
            LB = np.linalg.cholesky(B)
        except np.linalg.LinAlgError:
            return 1e300
        logdet_B = 2.0 * float(np.sum(np.log(np.diag(LB))))
        Binv = sla.cho_solve((LB, True), np.eye(n))
        BiY = self.Y @ Binv  # (n_series, n); Binv symmetric
        yBy = np.einsum("jn,jn->j", self.Y, BiY)
        K01 = np.exp((-0.5 / h2) * self.d2) * (self.d / h2)  # (batch, n, M)
        batch = K01.shape[0]
        BiY_rep = BiY[self.subj_of]  # (batch, n)
        cols = [np.ascontiguousarray(K01[:, :, m]) for m in range(self.M)]
        u = np.stack([np.einsum("bn,bn->b", c, BiY_rep) for c in cols], axis=1)
        K2 = K01.transpose(1, 0, 2).reshape(n, batch * self.M)
        W = (Binv @ K2).reshape(n, batch, self.M)
        del K01, K2
        wcols = [np.ascontiguousarray(W[:, :, m].T) for m in range(self.M)]
        del W
        diag = (1.0 + self.jitter) / h2
        if self.M == 1:
            st = diag - tau0sq * np.einsum("bn,bn->b", cols[0], wcols[0])
            if np.any(st <= 0):
                return 1e300
            logdet_ratio = np.log(st) - np.log(diag)
            quad_corr = tau0sq * u[:, 0] ** 2 / st
        elif self.M == 2:
            c00 = np.einsum("bn,bn->b", cols[0], wcols[0])
            c11 = np.einsum("bn,bn->b", cols[1], wcols[1])
            c01 = np.einsum("bn,bn->b", cols[0], wcols[1])
            dd = self.flatT[:, 0] - self.flatT[:, 1]
            off = np.exp(-0.5 * dd * dd / h2) * (1.0 / h2 - dd * dd / (h2 * h2))
            det_k = diag * diag - off * off
            s00 = diag - tau0sq * c00
            s11 = diag - tau0sq * c11
            s01 = off - tau0sq * c01
            det_s = s00 * s11 - s01 * s01
            if np.any(det_k <= 0) or np.any(s00 <= 0) or np.any(det_s <= 0):
                return 1e300
            logdet_ratio = np.log(det_s) - np.log(det_k)
            quad_corr = (
                tau0sq
                * (s11 * u[:, 0] ** 2 - 2 * s01 * u[:, 0] * u[:, 1] + s00 * u[:, 1] ** 2)
                / det_s
            )
        else:
            C = np.stack(
                [
                    np.stack(
                        [np.einsum("bn,bn->b", cols[m], wcols[k]) for k in range(self.M)],
                        axis=1,
                    )
                    for m in range(self.M)
                ],
                axis=1,
            )
            dd = self.flatT[:, :, None] - self.flatT[:, None, :]
            K11 = np.exp(-0.5 * dd * dd / h2) * (1.0 / h2 - dd * dd / (h2 * h2))
            K11 += (self.jitter / h2) * np.eye(self.M)[None, :, :]
            St = K11 - tau0sq * C
            try:
                Lk = np.linalg.cholesky(K11)
                Ls = np.linalg.cholesky(St)
            except np.linalg.LinAlgError:
                return 1e300
            logdet_ratio = 2.0 * (
                np.sum(np.log(np.diagonal(Ls, axis1=1, axis2=2)), axis=1)
                - np.sum(np.log(np.diagonal(Lk, axis1=1, axis2=2)), axis=1)
            )
            w = np.linalg.solve(St, u[:, :, None])[:, :, 0]
            quad_corr = tau0sq * np.sum(u * w, axis=1)
        quad = yBy[self.subj_of] + quad_corr
        ll = -0.5 * (
            n * (_LOG_2PI + np.log(self.sig_flat))
            + logdet_B
            + logdet_ratio
            + quad / self.sig_flat
        )
        total = float(np.sum(ll))
        if not np.isfinite(total):
            return 1e300
        return -total


@uses_single_threaded_blas
def mstep_optimize(
    t_draws: np.ndarray,
    sigma2_draws: np.ndarray,
    dataset: WaveformDataset,
    tau0: float,
    h: float,
    *,
    jitter: float = 1e-8,
    min_separation: float | None = None,
    restarts: int = 3,
    seed: int = 0,
    xatol: float = 1e-4,
    fatol: float = 1e-6,
) -> tuple[float, float, float, str]:
    """Maximize the Monte Carlo marginal likelihood over (tau0, h).

    Nelder-Mead in (log tau0, log h), initialized at the current
    estimate. Returns (tau0, h, objective, flag); on repeated non-finite
    objectives the previous estimate is kept and flagged. The returned
    objective never falls below the starting value (the start is a
    simplex vertex), giving monotone ascent.
    """
    objective = _MStepObjective(
        dataset, t_draws, sigma2_draws, jitter, min_separation
    )
    x0 = np.log([tau0, h])
    start_val = objective(x0)
    rng = substream(seed, "mstep-restart")
    best = None
    for attempt in range(restarts + 1):
        x_init = x0 if attempt == 0 else x0 + 0.25 * rng.standard_normal(2)
        res = minimize(
            objective,
            x_init,
            method="Nelder-Mead",
            options={"xatol": xatol, "fatol": fatol, "maxiter": 120},
        )
        if np.isfinite(res.fun) and res.fun < 1e299:
            best = res
            break
    if best is None or (start_val < 1e299 and best.fun > start_val):
        return float(tau0), float(h), -float(start_val), "kept-previous"
    tau0_new, h_new = np.exp(best.x)
    return float(tau0_new), float(h_new), -float(best.fun), "ok"


def _default_theta(dataset: WaveformDataset, config: RunConfig) -> tuple[float, float]:
    tau0 = config.init_tau0
    h = config.init_h
    if tau0 is None:
        sd = float(np.std(np.concatenate([b.ravel() for b in dataset.observations])))
        tau0 = max(sd, 1e-3) / np.sqrt(config.init_sigma2)
    if h is None:
        h = 0.1 * dataset.grid.width
    return float(tau0), float(h)


def run_mcem(
    dataset: WaveformDataset,
    windows: SearchWindows,
    design: FactorDesign,
    config: RunConfig,
    *,
    draw_callback=None,
) -> FitResult:
    """Full fit: EM iterations to tune (tau0, h), then the final chains.

    Stops when the Euclidean move in (log tau0, log h) drops below
    config.epsilon, or flags non-convergence after max_em_iters and
    still produces the final chains at the last estimate. The final run
    draws `chains` independent chains with per-chain substreams;
    `draw_callback(chain_id, index, state)` streams retained draws out
    as they are produced.
    """
    report = validate_dataset(dataset, windows)
    if not report.ok:
        raise ValidationError(report.violations)
    c = config
    seed = c.seed
    sampler = MwgSampler(dataset, windows, design, c)
    tau0, h = _default_theta(dataset, c)
    sampler.set_theta(tau0, h)

    common = c.estep_rng == "common"
    init_streams = _Streams(seed, ("estep", 0), sampler.n_series)
    state = sampler.init_state(init_streams)
    scales = sampler.initial_scales()
    trace = EmTrace()
    retained = c.estep_retained
    L = min(c.mstep_subsample, retained)
    damped_iters = 0
    damping_fallback = max(8, c.max_em_iters // 3)

    for j in range(1, c.max_em_iters + 1):
        # The chain is warm-started across EM iterations. In "common"
        # mode every E-step replays the same random numbers, so the
        # theta update noise is strongly correlated across iterations
        # and the damped update settles deterministically.
        context = ("estep",) if common else ("estep", j)
        streams = _Streams(seed, context, sampler.n_series)
        adapt = j <= c.estep_adapt_iters and damped_iters == 0
        batch, stats, state, scales = sampler.run(
            state,
            scales,
            streams,
            total=c.estep_draws,
            burnin=c.estep_burnin,
            thin=1,
            adapt=adapt,
        )
        sub_rng = substream(seed, "subsample", *(() if common else (j,)))
        idx = np.sort(sub_rng.choice(retained, size=L, replace=False))
        tau0_opt, h_opt, obj, flag = mstep_optimize(
            batch.t[idx],
            batch.sigma2[idx],
            dataset,
            tau0,
            h,
            jitter=c.jitter,
            min_separation=c.min_separation,
            seed=seed,
        )
        log_cur = np.log([tau0, h])
        log_opt = np.log([tau0_opt, h_opt])
        raw_move = float(np.linalg.norm(log_opt - log_cur))
        # Once the argmax move plateaus at Monte Carlo noise level (or a
        # fallback iteration count passes), shrink the update step
        # geometrically; the shrinking is sticky so the epsilon rule is
        # guaranteed to terminate despite Monte Carlo noise.
        if c.mstep_damping < 1.0 and (
            damped_iters > 0 or raw_move < c.damping_threshold or j >= damping_fallback
        ):
            damped_iters += 1
        alpha = c.mstep_damping**damped_iters
        log_new = log_cur + alpha * (log_opt - log_cur)
        tau0_new, h_new = np.exp(log_new)
        delta = float(np.linalg.norm(log_new - log_cur))
        trace.iterations.append(
            EmIteration(
                index=j,
                tau0=float(tau0_new),
                h=float(h_new),
                objective=obj,
                delta=delta,
                accept=stats.rates(),
                mstep_flag=flag,
                raw_move=raw_move,
                step_size=alpha,
            )
        )
        logger.info(
            "EM iter %d: tau0=%.6g h=%.6g delta=%.3g step=%.3g objective=%.6g accept=%s",
            j,
            tau0_new,
            h_new,
            delta,
            alpha,
            obj,
            {k: round(v, 3) for k, v in stats.rates().items()},
        )
        tau0, h = float(tau0_new), float(h_new)
        sampler.set_theta(tau0, h)
        if delta < c.epsilon:
            trace.converged = True
            break
    if not trace.converged:
        trace.warning = (
            f"EM did not reach epsilon={c.epsilon:g} within {c.max_em_iters} iterations"
        )
        logger.warning(trace.warning)

    if c.threads > 1 and draw_callback is None and c.chains > 1:
        from concurrent.futures import ProcessPoolExecutor

        args = [
            (dataset, windows, design, c, tau0, h, scales, k)
            for k in range(1, c.chains + 1)
        ]
        with ProcessPoolExecutor(max_workers=c.threads) as pool:
            chains = list(pool.map(_run_final_chain, args))
    else:
        chains = []
        for k in range(1, c.chains + 1):
            cb = None
            if draw_callback is not None:
                cb = lambda idx, st, _k=k: draw_callback(_k, idx, st)
            chains.append(
                _run_final_chain(
                    (dataset, windows, design, c, tau0, h, scales, k), cb
                )
            )
    return FitResult(
        tau0=tau0, h=h, trace=trace, chains=chains, config=c, scales=scales
    )


def _run_final_chain(args, draw_callback=None) -> PosteriorChain:
    """One final sampling chain; picklable for chain-level parallelism."""
    dataset, windows, design, config, tau0, h, scales, k = args
    sampler = MwgSampler(dataset, windows, design, config)
    sampler.set_theta(tau0, h)
    streams = _Streams(config.seed, ("chain", k), sampler.n_series)
    state = sampler.init_state(streams)
    batch, stats, _, _ = sampler.run(
        state,
        scales.copy(),
        streams,
        total=config.final_total,
        burnin=config.final_burnin,
        thin=config.thin,
        adapt=True,
        draw_callback=draw_callback,
    )
    return PosteriorChain(
        chain_id=k,
        t=batch.t,
        beta0=batch.beta0,
        beta=batch.beta,
        eta=batch.eta,
        sigma2=batch.sigma2,
        r=batch.r,
        groups=dataset.groups,
        subjects=tuple(
            (dataset.groups[g], dataset.subject_labels[g][s])
            for g, s in dataset.subject_index()
        ),
        windows=windows.bounds,
        effect_names=design.columns,
        acceptance=stats.rates(),
    )
