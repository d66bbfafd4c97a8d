"""Sampler and EM engine against enumeration, griddy, and brute-force
oracles. The slow full-pipeline checks live in test_acceptance."""

import numpy as np
import pytest

from slam.anova import AnovaCoefficients
from slam.config import PriorSpec, RunConfig
from slam.data_model import SearchWindows, WaveformDataset, encode_design
from slam.dgp import MarginalCache, conditional_moments, log_marginal, sample_path
from slam.distributions import gbeta_logpdf, invgamma_logpdf
from slam.errors import ValidationError
from slam.kernel import KernelHyper
from slam.mcem import (
    AcceptanceStats,
    LatentState,
    MwgSampler,
    ProposalScales,
    _MStepObjective,
    adapt_proposals,
    estep_sample,
    mstep_optimize,
    run_mcem,
)

from conftest import sine_cosine_dataset


def single_subject_dataset(t_true, tau, h, sigma, n=100, seed=5, group="g1"):
    """One series drawn from the constrained GP at known stationary points."""
    grid = np.arange(n) / (n - 1)
    cond = conditional_moments(grid, np.atleast_1d(t_true), KernelHyper(tau=tau, h=h))
    rng = np.random.default_rng(seed)
    f = sample_path(cond, 1, rng)[0]
    y = f + sigma * rng.standard_normal(n)
    return WaveformDataset.from_series({(group, "s01"): (grid, y)}), f


class TestSigma2Conditional:
    def test_shape_arithmetic(self):
        ds = sine_cosine_dataset(n=100, subjects=10)
        windows = SearchWindows(((0.0, 0.5), (0.5, 1.0)))
        config = RunConfig(windows=windows.bounds, priors=PriorSpec(alpha_sigma=0.5))
        sampler = MwgSampler(ds, windows, encode_design(ds.groups), config)
        sampler.set_theta(4.0, 0.2)
        state = sampler.initial_state()
        shape, _ = sampler.sigma2_conditional(state)
        assert shape == pytest.approx(1000.5)

    def test_conjugacy_against_griddy_oracle(self):
        # n=5, one subject, fixed t: Gibbs draws must match the
        # normalized likelihood x prior over a sigma^2 grid. The oracle
        # evaluates the dense Gaussian marginal directly, independent of
        # the sampler's whitened quadratic-form path.
        n = 5
        grid = np.arange(n) / (n - 1)
        t_true = 0.45
        tau0, h = 2.0, 0.35
        rng = np.random.default_rng(8)
        y = np.array([0.31, -0.12, 0.05, 0.4, -0.2])
        series = {("g", "s"): (grid, y)}
        ds = WaveformDataset.from_series(series)
        windows = SearchWindows(((0.0, 1.0),))
        config = RunConfig(windows=windows.bounds, seed=2)
        state = LatentState(
            t=np.array([[t_true]]),
            coeffs=AnovaCoefficients(np.zeros(1), np.zeros((0, 1))),
            eta=np.ones((1, 1)),
            sigma2=0.3,
            r=np.full((1, 1), 0.5),
        )
        batch, _ = estep_sample(
            ds,
            windows,
            encode_design(ds.groups),
            state,
            tau0=tau0,
            h=h,
            draws=50000,
            seed=21,
            config=config,
            burnin=200,
            update_families=("sigma2",),
        )
        draws = batch.sigma2
        # griddy oracle via the dense marginal
        s2_grid = np.linspace(1e-3, 2.0, 3000)
        lp = np.empty(s2_grid.size)
        for i, s2 in enumerate(s2_grid):
            hyper = KernelHyper.from_noise_ratio(tau0, h, s2)
            cond = conditional_moments(grid, [t_true], hyper, jitter=0.0)
            lp[i] = log_marginal(y, cond, s2) + invgamma_logpdf(s2, 0.5, 0.5)
        w = np.exp(lp - lp.max())
        w /= w.sum()
        edges = np.linspace(1e-3, 2.0, 61)
        hist, _ = np.histogram(draws, bins=edges)
        hist = hist / draws.size
        grid_mass = np.array(
            [
                w[(s2_grid >= lo) & (s2_grid < hi)].sum()
                for lo, hi in zip(edges[:-1], edges[1:])
            ]
        )
        tv = 0.5 * np.abs(hist - grid_mass).sum()
        assert tv < 0.05


class TestTSampler:
    def test_prior_recovery_with_likelihood_disabled(self):
        # With the likelihood off and (r, eta) frozen, the t chain must
        # sample its general-beta prior; chi-square GOF at p > 0.001.
        from scipy import stats as sps

        ds, _ = single_subject_dataset(0.4, tau=1.0, h=0.2, sigma=0.25)
        windows = SearchWindows(((0.0, 1.0),))
        config = RunConfig(windows=windows.bounds)
        r_fix, eta_fix = 0.6, 5.0
        state = LatentState(
            t=np.array([[0.5]]),
            coeffs=AnovaCoefficients(np.array([np.log(r_fix / (1 - r_fix))]), np.zeros((0, 1))),
            eta=np.array([[eta_fix]]),
            sigma2=1.0,
            r=np.array([[r_fix]]),
        )
        batch, _ = estep_sample(
            ds,
            windows,
            encode_design(ds.groups),
            state,
            tau0=1.0,
            h=0.2,
            draws=20000,
            seed=33,
            config=config,
            burnin=500,
            use_likelihood=False,
            update_families=("t",),
        )
        draws = batch.t[:, 0, 0]
        edges = np.linspace(0.0, 1.0, 51)
        counts, _ = np.histogram(draws, bins=edges)
        probs = np.empty(50)
        for i in range(50):
            xs = np.linspace(edges[i], edges[i + 1], 64)
            probs[i] = np.trapezoid(np.exp(gbeta_logpdf(xs, r_fix, eta_fix, 0.0, 1.0)), xs)
        probs /= probs.sum()
        expected = probs * draws.size
        keep = expected > 5
        stat = np.sum((counts[keep] - expected[keep]) ** 2 / expected[keep])
        p = sps.chi2.sf(stat, df=int(keep.sum()) - 1)
        assert p > 0.001

    def test_detailed_balance_on_binned_chain(self):
        # Empirical transition frequencies of the prior-only t chain
        # between 3 bins must satisfy pi_i P_ij = pi_j P_ji within
        # Monte Carlo error (enumeration oracle over the binned kernel).
        ds, _ = single_subject_dataset(0.4, tau=1.0, h=0.2, sigma=0.25)
        windows = SearchWindows(((0.0, 1.0),))
        config = RunConfig(windows=windows.bounds, t_uniform_mix=0.2)
        r_fix, eta_fix = 0.5, 3.0
        state = LatentState(
            t=np.array([[0.5]]),
            coeffs=AnovaCoefficients(np.zeros(1), np.zeros((0, 1))),
            eta=np.array([[eta_fix]]),
            sigma2=1.0,
            r=np.array([[r_fix]]),
        )
        batch, _ = estep_sample(
            ds,
            windows,
            encode_design(ds.groups),
            state,
            tau0=1.0,
            h=0.2,
            draws=60000,
            seed=34,
            config=config,
            burnin=1000,
            use_likelihood=False,
            update_families=("t",),
            adapt=False,
        )
        draws = batch.t[:, 0, 0]
        bins = np.digitize(draws, [1 / 3, 2 / 3])
        flow = np.zeros((3, 3))
        for a, b in zip(bins[:-1], bins[1:]):
            flow[a, b] += 1
        total = flow.sum()
        for i in range(3):
            for j in range(i + 1, 3):
                fij, fji = flow[i, j], flow[j, i]
                se = np.sqrt(fij + fji)
                assert abs(fij - fji) < 3.0 * se + 1e-9, (i, j, fij, fji)

    def test_posterior_mode_matches_grid_search_oracle(self):
        # Data from a single fixed t with (tau, h) known: the griddy
        # posterior mode lands within one grid step of the truth and the
        # sampler mean matches the griddy mean.
        t_true = 0.42
        tau, h, sigma = 2.0, 0.15, 0.25
        ds, _ = single_subject_dataset(t_true, tau=tau, h=h, sigma=sigma, n=100, seed=11)
        grid = ds.grid.points
        windows = SearchWindows(((0.0, 1.0),))
        config = RunConfig(windows=windows.bounds)
        tau0 = tau / sigma
        r_fix, eta_fix = 0.5, 2.0
        cache = MarginalCache(grid, tau0=tau0, h=h)
        series = cache.prepare_series(ds.series(0, 0))
        t_grid = np.linspace(0.005, 0.995, 991)
        lp = np.array(
            [
                cache.loglik(series, [t], sigma**2)[0]
                + float(gbeta_logpdf(t, r_fix, eta_fix, 0.0, 1.0))
                for t in t_grid
            ]
        )
        w = np.exp(lp - lp.max())
        w /= w.sum()
        oracle_mode = float(t_grid[np.argmax(lp)])
        oracle_mean = float(np.sum(t_grid * w))
        step = grid[1] - grid[0]
        assert abs(oracle_mode - t_true) <= step + 1e-12

        state = LatentState(
            t=np.array([[0.7]]),
            coeffs=AnovaCoefficients(np.zeros(1), np.zeros((0, 1))),
            eta=np.array([[eta_fix]]),
            sigma2=sigma**2,
            r=np.array([[r_fix]]),
        )
        batch, _ = estep_sample(
            ds,
            windows,
            encode_design(ds.groups),
            state,
            tau0=tau0,
            h=h,
            draws=6000,
            seed=35,
            config=config,
            burnin=1000,
            update_families=("t",),
        )
        sampler_mean = float(batch.t[:, 0, 0].mean())
        sd = float(batch.t[:, 0, 0].std())
        assert abs(sampler_mean - oracle_mean) < max(4 * sd / np.sqrt(200), 5e-4)


class TestAdaptProposals:
    def _stats(self, t_rate=None, family=None, rate=None):
        stats = AcceptanceStats(
            t_accepted=np.zeros(2, dtype=int),
            t_proposed=np.zeros(2, dtype=int),
            t_window_accepted=np.zeros(2, dtype=int),
            t_window_proposed=np.zeros(2, dtype=int),
        )
        stats.reset_window()
        if t_rate is not None:
            stats.t_window_proposed[:] = 40
            stats.t_window_accepted[:] = int(40 * t_rate)
        if family is not None:
            stats.window_proposed[family] = 40
            stats.window_accepted[family] = int(40 * rate)
        return stats

    def _scales(self):
        return ProposalScales(
            t=np.full((2, 2), 0.05),
            beta0=np.full(2, 0.3),
            beta=np.full((1, 2), 0.3),
            eta=np.full((1, 2), 0.5),
        )

    def test_high_acceptance_widens(self):
        out = adapt_proposals(self._stats(t_rate=0.9), self._scales())
        assert np.all(out.t == pytest.approx(0.05 * 1.25))

    def test_in_band_unchanged(self):
        out = adapt_proposals(self._stats(t_rate=0.35), self._scales())
        assert np.all(out.t == pytest.approx(0.05))

    def test_low_acceptance_shrinks(self):
        out = adapt_proposals(self._stats(family="beta0", rate=0.05), self._scales())
        assert np.all(out.beta0 == pytest.approx(0.3 / 1.25))

    def test_frozen_is_identity(self):
        scales = self._scales()
        out = adapt_proposals(self._stats(t_rate=0.95), scales, frozen=True)
        assert np.all(out.t == pytest.approx(0.05))
        assert out is scales


class TestMStep:
    def test_monotone_ascent_from_start(self):
        ds = sine_cosine_dataset(subjects=3, seed=9)
        windows = SearchWindows(((0.0, 0.5), (0.5, 1.0)))
        config = RunConfig(windows=windows.bounds, seed=5)
        batch, _ = estep_sample(
            ds, windows, encode_design(ds.groups), None,
            tau0=5.0, h=0.2, draws=60, seed=6, config=config, burnin=40,
        )
        T, sig = batch.t[-30:], batch.sigma2[-30:]
        start = _MStepObjective(ds, T, sig, 1e-8, None)(np.log([5.0, 0.2]))
        tau0_new, h_new, obj, flag = mstep_optimize(T, sig, ds, 5.0, 0.2)
        assert flag == "ok"
        assert obj >= -start - 1e-6

    def test_recovers_length_scale_on_synthetic_data(self):
        # Single subject from known (tau, h) = (1, 0.1) at n=100 with
        # fixed true t: recovered h within a factor 1.5.
        t_true = np.array([0.35, 0.75])
        tau, h, sigma = 1.0, 0.1, 0.25
        n = 100
        grid = np.arange(n) / (n - 1)
        cond = conditional_moments(grid, t_true, KernelHyper(tau=tau, h=h))
        rng = np.random.default_rng(17)
        f = sample_path(cond, 1, rng)[0]
        y = f + sigma * rng.standard_normal(n)
        ds = WaveformDataset.from_series({("g", "s"): (grid, y)})
        T = np.tile(t_true, (1, 1, 1))  # L=1 draw fixed at truth
        sig2 = np.array([sigma**2])
        tau0_new, h_new, _, flag = mstep_optimize(T, sig2, ds, tau / sigma, h)
        assert flag == "ok"
        assert h / 1.5 <= h_new <= h * 1.5

    def test_single_draw_equals_direct_marginal_maximization(self):
        # With L=1 and fixed t the objective is exactly the dense
        # marginal log-density of the data.
        t_fix = np.array([0.3, 0.7])
        ds = sine_cosine_dataset(subjects=1, seed=3)
        T = np.tile(t_fix, (1, ds.n_series, 1))
        sig2 = np.array([0.0625])
        obj = _MStepObjective(ds, T, sig2, 0.0, None)
        tau0, h = 6.0, 0.2
        got = -obj(np.log([tau0, h]))
        want = 0.0
        for g, s, y in ds.iter_series():
            hyper = KernelHyper.from_noise_ratio(tau0, h, 0.0625)
            cond = conditional_moments(ds.grid.points, t_fix, hyper, jitter=0.0)
            want += log_marginal(y, cond, 0.0625)
        assert got == pytest.approx(want, abs=1e-6)

    def test_kept_previous_on_pathological_draws(self):
        ds = sine_cosine_dataset(subjects=1, seed=3)
        # Stationary points closer than the separation floor poison
        # every draw, so the optimizer keeps the previous estimate.
        T = np.tile([0.5, 0.5 + 1e-9], (1, ds.n_series, 1))
        sig2 = np.array([0.0625])
        tau0, h, obj, flag = mstep_optimize(T, sig2, ds, 6.0, 0.2)
        assert flag == "kept-previous"
        assert (tau0, h) == (6.0, 0.2)


@pytest.fixture(scope="module")
def small_fit():
    ds = sine_cosine_dataset(n=60, subjects=3, seed=2)
    windows = SearchWindows(((0.0, 0.5), (0.5, 1.0)))
    design = encode_design(ds.groups)
    config = RunConfig(
        windows=windows.bounds,
        seed=19,
        estep_draws=200,
        estep_burnin=60,
        mstep_subsample=60,
        max_em_iters=30,
        final_total=300,
        final_burnin=100,
        thin=2,
        chains=2,
    )
    return ds, windows, design, config


class TestRunMcem:

    def test_identical_seeds_reproduce_bitwise(self, small_fit):
        ds, windows, design, config = small_fit
        r1 = run_mcem(ds, windows, design, config)
        r2 = run_mcem(ds, windows, design, config)
        assert [it.tau0 for it in r1.trace.iterations] == [
            it.tau0 for it in r2.trace.iterations
        ]
        assert (r1.tau0, r1.h) == (r2.tau0, r2.h)
        for c1, c2 in zip(r1.chains, r2.chains):
            np.testing.assert_array_equal(c1.t, c2.t)
            np.testing.assert_array_equal(c1.sigma2, c2.sigma2)
            np.testing.assert_array_equal(c1.beta0, c2.beta0)

    def test_epsilon_rule_terminates(self, small_fit):
        ds, windows, design, config = small_fit
        result = run_mcem(ds, windows, design, config)
        assert result.trace.converged
        assert result.trace.iterations[-1].delta < config.epsilon
        assert len(result.trace.iterations) <= config.max_em_iters

    def test_retained_draws_respect_support(self, small_fit):
        ds, windows, design, config = small_fit
        result = run_mcem(ds, windows, design, config)
        for chain in result.chains:
            a = np.array([w[0] for w in windows.bounds])
            b = np.array([w[1] for w in windows.bounds])
            assert np.all(chain.t > a) and np.all(chain.t < b)
            assert np.all(chain.sigma2 > 0)
            assert np.all(chain.eta > 0)

    def test_subject_order_invariance(self):
        # Swapping subject input order within a group leaves the theta
        # trajectory unchanged (canonical ordering + per-subject streams).
        def build(swap):
            n, subjects, sigma = 60, 3, 0.25
            grid = np.arange(n) / (n - 1)
            rng = np.random.default_rng(1)
            entries = []
            for s in range(1, subjects + 1):
                f = -2 * np.sin(2 * np.pi * grid + s / 15 - 0.3)
                entries.append(((f"s{s}"), f + sigma * rng.standard_normal(n)))
            if swap:
                entries = list(reversed(entries))
            return WaveformDataset.from_series(
                {("g", name): (grid, y) for name, y in entries}
            )

        windows = SearchWindows(((0.0, 0.5), (0.5, 1.0)))
        config = RunConfig(
            windows=windows.bounds,
            seed=4,
            estep_draws=120,
            estep_burnin=40,
            mstep_subsample=40,
            max_em_iters=4,
            epsilon=1e-12,
            final_total=60,
            final_burnin=20,
            thin=1,
            chains=1,
            mstep_damping=1.0,
        )
        a = run_mcem(build(False), windows, encode_design(["g"]), config)
        b = run_mcem(build(True), windows, encode_design(["g"]), config)
        assert [it.tau0 for it in a.trace.iterations] == [
            it.tau0 for it in b.trace.iterations
        ]

    def test_non_convergence_flagged_but_chains_produced(self):
        ds = sine_cosine_dataset(n=60, subjects=2, seed=2)
        windows = SearchWindows(((0.0, 0.5), (0.5, 1.0)))
        config = RunConfig(
            windows=windows.bounds,
            seed=19,
            estep_draws=100,
            estep_burnin=30,
            mstep_subsample=30,
            max_em_iters=2,
            epsilon=1e-14,
            mstep_damping=1.0,  # undamped: epsilon unreachable in 2 iters
            final_total=80,
            final_burnin=30,
            thin=1,
            chains=1,
        )
        result = run_mcem(ds, windows, encode_design(ds.groups), config)
        assert not result.trace.converged
        assert result.trace.warning is not None
        assert len(result.chains) == 1
        assert result.chains[0].n_draws > 0

    def test_default_schedule_matches_documented_values(self):
        config = RunConfig()
        assert config.estep_draws == 2100
        assert config.estep_burnin == 100
        assert config.estep_retained == 2000
        assert config.mstep_subsample == 500
        assert config.epsilon == 1e-5
        assert config.final_total == 21000
        assert config.final_burnin == 1000
        assert config.thin == 10
        assert config.chains == 4


class TestLatentState:
    def test_positivity_enforced(self):
        with pytest.raises(ValidationError):
            LatentState(
                t=np.array([[0.4]]),
                coeffs=AnovaCoefficients(np.zeros(1), np.zeros((0, 1))),
                eta=np.array([[-1.0]]),
                sigma2=1.0,
                r=np.array([[0.5]]),
            )
        with pytest.raises(ValidationError):
            LatentState(
                t=np.array([[0.4]]),
                coeffs=AnovaCoefficients(np.zeros(1), np.zeros((0, 1))),
                eta=np.array([[1.0]]),
                sigma2=0.0,
                r=np.array([[0.5]]),
            )


class TestTwoWayDesign:
    def test_two_by_two_fit_runs_and_recovers_cell_structure(self):
        # 2x2 cells with additive latency effects through the link; the
        # sampler must handle multiple effect columns per component.
        n, S = 60, 4
        grid = np.arange(n) / (n - 1)
        rng = np.random.default_rng(44)
        from slam.distributions import get_link

        link = get_link("logit")
        cells = {}
        series = {}
        b0, bA, bB = 0.0, -0.6, 0.8
        for a_idx, a in enumerate(("a1", "a2")):
            for b_idx, b in enumerate(("b1", "b2")):
                label = f"{a}*{b}"
                cells[label] = (a, b)
                r = link.inverse(b0 + bA * a_idx + bB * b_idx)
                t_true = 0.5 * r
                for s in range(S):
                    f = -((grid - t_true) ** 2) * 20
                    series[(label, f"s{s}")] = (
                        grid,
                        f + 0.2 * rng.standard_normal(n),
                    )
        ds = WaveformDataset.from_series(series, cells=cells)
        windows = SearchWindows(((0.0, 0.5),))
        design = encode_design(ds.groups, kind="two-way", cells=cells)
        assert design.n_effects == 2
        config = RunConfig(
            windows=windows.bounds,
            seed=55,
            estep_draws=200,
            estep_burnin=60,
            mstep_subsample=60,
            max_em_iters=12,
            final_total=600,
            final_burnin=200,
            thin=2,
            chains=1,
        )
        result = run_mcem(ds, windows, design, config)
        chain = result.chains[0]
        assert chain.beta.shape[1] == 2
        # cell ordering of recovered group locations matches the truth
        r_hat = chain.r.mean(axis=0)[:, 0]
        truth_r = np.array(
            [
                float(get_link("logit").inverse(b0 + bA * ai + bB * bi))
                for (ai, bi) in ((0, 0), (0, 1), (1, 0), (1, 1))
            ]
        )
        labels = list(ds.groups)
        order_hat = np.argsort(r_hat)
        order_true = np.argsort(truth_r)
        np.testing.assert_array_equal(order_hat, order_true)
