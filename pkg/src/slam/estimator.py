"""Estimator facade over the full fitting pipeline.

SlamModel follows the scikit-learn estimator protocol: plain-keyword
constructor, get_params/set_params, a fit method that stores learned
state in trailing-underscore attributes, and clone compatibility. The
heavy lifting lives in the functional modules; this class wires them
together for interactive use.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .config import PriorSpec, RunConfig
from .data_model import SearchWindows, WaveformDataset, encode_design, validate_dataset
from .errors import SlamError, ValidationError
from .inference import (
    attach_paths,
    curve_band,
    group_contrast,
    half_integral_peak,
    latency_summary,
    max_peak,
    mean_window_amplitude,
    pool_chains,
    rhat,
)
from .mcem import run_mcem

__all__ = ["SlamModel"]


class SlamModel(BaseEstimator):
    """Hierarchical latency/amplitude model for multi-subject waveforms.

    Fits smooth per-subject curves whose stationary points (component
    latencies) are tied across subjects by a latent factor regression,
    with kernel hyperparameters tuned by Monte Carlo EM and posterior
    summaries drawn from the final MCMC chains.

    Parameters mirror RunConfig; see that class for semantics. The
    estimator is immutable during fit in the scikit-learn sense: all
    learned state lands in attributes ending with an underscore.

    Attributes
    ----------
    tau0_, h_ : float
        Tuned kernel hyperparameters (amplitude is tau0_ * sigma).
    trace_ : EmTrace
        Per-iteration EM diagnostics.
    chains_ : list of PosteriorChain
        Final sampling chains.
    pooled_ : PosteriorChain
        All chains pooled, with curve realizations attached.
    """

    def __init__(
        self,
        windows=((0.0, 0.5), (0.5, 1.0)),
        window_unit="grid",
        design_kind="one-way",
        baseline=None,
        link="logit",
        priors=None,
        seed=1,
        estep_draws=2100,
        estep_burnin=100,
        mstep_subsample=500,
        epsilon=1e-5,
        max_em_iters=100,
        estep_rng="common",
        final_total=21000,
        final_burnin=1000,
        thin=10,
        chains=4,
        paths_per_chain=500,
        credible_level=0.95,
        eta_fixed=None,
        jitter=1e-8,
    ):
        self.windows = windows
        self.window_unit = window_unit
        self.design_kind = design_kind
        self.baseline = baseline
        self.link = link
        self.priors = priors
        self.seed = seed
        self.estep_draws = estep_draws
        self.estep_burnin = estep_burnin
        self.mstep_subsample = mstep_subsample
        self.epsilon = epsilon
        self.max_em_iters = max_em_iters
        self.estep_rng = estep_rng
        self.final_total = final_total
        self.final_burnin = final_burnin
        self.thin = thin
        self.chains = chains
        self.paths_per_chain = paths_per_chain
        self.credible_level = credible_level
        self.eta_fixed = eta_fixed
        self.jitter = jitter

    # -- fitting -------------------------------------------------------------

    def _config(self) -> RunConfig:
        priors = self.priors if self.priors is not None else PriorSpec()
        if isinstance(priors, dict):
            priors = PriorSpec(**priors)
        return RunConfig(
            seed=self.seed,
            windows=tuple(tuple(w) for w in self.windows),
            window_unit=self.window_unit,
            design_kind=self.design_kind,
            baseline=self.baseline,
            link=self.link,
            priors=priors,
            estep_draws=self.estep_draws,
            estep_burnin=self.estep_burnin,
            mstep_subsample=self.mstep_subsample,
            epsilon=self.epsilon,
            max_em_iters=self.max_em_iters,
            estep_rng=self.estep_rng,
            final_total=self.final_total,
            final_burnin=self.final_burnin,
            thin=self.thin,
            chains=self.chains,
            paths_per_chain=self.paths_per_chain,
            credible_level=self.credible_level,
            eta_fixed=self.eta_fixed,
            jitter=self.jitter,
        )

    def fit(self, dataset: WaveformDataset, y=None):
        """Run the full EM + sampling pipeline on a WaveformDataset."""
        if not isinstance(dataset, WaveformDataset):
            raise ValidationError(
                "fit expects a WaveformDataset; use read_long_csv or "
                "WaveformDataset.from_series to build one"
            )
        config = self._config()
        if config.window_unit == "normalized":
            windows = SearchWindows.from_normalized(config.windows, dataset.grid)
        else:
            windows = SearchWindows(config.windows)
        report = validate_dataset(dataset, windows)
        if not report.ok:
            raise ValidationError(report.violations)
        cells = None
        if config.design_kind == "two-way":
            if dataset.cells is None:
                raise ValidationError("two-way design requires cell labels in the data")
            cells = dict(zip(dataset.groups, dataset.cells))
        design = encode_design(
            dataset.groups, kind=config.design_kind, baseline=config.baseline, cells=cells
        )
        result = run_mcem(dataset, windows, design, config)
        self.dataset_ = dataset
        self.windows_ = windows
        self.design_ = design
        self.config_ = config
        self.tau0_ = result.tau0
        self.h_ = result.h
        self.trace_ = result.trace
        self.chains_ = result.chains
        pooled = pool_chains(result.chains)
        attach_paths(
            pooled,
            dataset,
            result.tau0,
            result.h,
            count=config.paths_per_chain,
            refine=config.path_refine,
            seed=config.seed,
            jitter=config.jitter,
        )
        self.pooled_ = pooled
        return self

    def _check_fitted(self):
        if not hasattr(self, "pooled_"):
            raise SlamError("model is not fitted; call fit first")

    # -- posterior summaries ---------------------------------------------------

    def latency_summary(self, level=None):
        self._check_fitted()
        return latency_summary(self.pooled_, level or self.credible_level)

    def group_contrast(self, pairs, level=None):
        self._check_fitted()
        return group_contrast(self.pooled_, pairs, level or self.credible_level)

    def amplitude(self, component, method="max-peak", orientation="peak", baseline=0.0,
                  window=None):
        """Posterior amplitude samples per subject for one component."""
        self._check_fitted()
        if method == "max-peak":
            return max_peak(self.pooled_, component, orientation, baseline)
        if method == "half-integral":
            return half_integral_peak(self.pooled_, component, baseline)
        if method == "mean-window":
            if window is None:
                raise ValidationError("mean-window amplitude requires a window")
            return mean_window_amplitude(self.pooled_, window, baseline)
        raise ValidationError(f"unknown amplitude method {method!r}")

    def curve_band(self, level=None):
        self._check_fitted()
        return curve_band(self.pooled_, level or self.credible_level)

    def diagnostics(self):
        """Split-chain potential scale reduction factors per parameter."""
        self._check_fitted()
        if len(self.chains_) < 2:
            raise ValidationError("diagnostics need at least 2 chains")
        return rhat(self.chains_)

    def predict_curves(self):
        """Posterior mean curve per subject at the grid points."""
        self._check_fitted()
        bands = curve_band(self.pooled_, self.credible_level)
        return {(b["group"], b["subject"]): b["mean"] for b in bands}
