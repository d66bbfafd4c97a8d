"""Derivative-constrained GP: moments, marginals, posterior, fast path."""

import numpy as np
import pytest

from slam.dgp import (
    MarginalCache,
    conditional_mean_at,
    conditional_moments,
    log_marginal,
    posterior_moments,
    posterior_path,
    sample_path,
)
from slam.errors import DegenerateConditioningError
from slam.kernel import KernelHyper, k00


def dense_gaussian_logpdf(y, mean, cov):
    """Brute-force reference: explicit inverse and slogdet."""
    resid = y - mean
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    return -0.5 * (len(y) * np.log(2 * np.pi) + logdet + resid @ np.linalg.inv(cov) @ resid)


class TestConditionalMoments:
    def test_zero_mean(self):
        grid = np.linspace(0, 1, 50)
        cond = conditional_moments(grid, [0.3, 0.7], KernelHyper(tau=1.2, h=0.2))
        np.testing.assert_array_equal(cond.mean, np.zeros(50))

    def test_conditioning_reduces_variance(self):
        grid = np.linspace(0, 1, 60)
        hyper = KernelHyper(tau=1.0, h=0.25)
        cond = conditional_moments(grid, [0.4], hyper)
        prior_diag = np.diag(k00(grid, grid, hyper))
        assert np.all(np.diag(cond.cov) <= prior_diag + 1e-12)

    def test_variance_untouched_at_the_constraint_itself(self):
        # k01 vanishes at the constrained point, so no reduction there.
        grid = np.linspace(0, 1, 101)
        hyper = KernelHyper(tau=1.0, h=0.5)
        cond = conditional_moments(grid, [0.5], hyper)
        i = 50
        assert grid[i] == pytest.approx(0.5)
        assert cond.cov[i, i] == pytest.approx(1.0, rel=1e-10)

    def test_degenerate_points_raise_with_pair_named(self):
        grid = np.linspace(0, 1, 30)
        with pytest.raises(DegenerateConditioningError) as err:
            conditional_moments(grid, [0.5, 0.5 + 1e-9], KernelHyper(tau=1.0, h=0.3))
        assert "0.5" in str(err.value)


class TestLogMarginal:
    def test_degenerate_amplitude_reduces_to_standard_normal(self):
        grid = np.array([0.0, 1.0, 2.0])[:2]
        cond = conditional_moments(
            np.linspace(0, 1, 2 + 1), [0.5], KernelHyper(tau=1e-12, h=0.5)
        )
        y = np.zeros(3)
        got = log_marginal(y, cond, sigma2=1.0)
        assert got == pytest.approx(-1.5 * np.log(2 * np.pi), abs=1e-8)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(7)
        grid = np.linspace(0, 1, 10)
        for _ in range(10):
            hyper = KernelHyper(
                tau=float(rng.uniform(0.5, 2)), h=float(rng.uniform(0.1, 0.6))
            )
            t = np.sort(rng.uniform(0.1, 0.9, size=2))
            if np.diff(t)[0] < 0.05:
                continue
            cond = conditional_moments(grid, t, hyper)
            y = rng.normal(size=10)
            sigma2 = float(rng.uniform(0.2, 2.0))
            got = log_marginal(y, cond, sigma2)
            want = dense_gaussian_logpdf(y, cond.mean, cond.cov + sigma2 * np.eye(10))
            assert got == pytest.approx(want, abs=1e-8)

    def test_variance_inflation_lowers_density_at_mode(self):
        grid = np.linspace(0, 1, 20)
        cond = conditional_moments(grid, [0.5], KernelHyper(tau=1.0, h=0.3))
        y = np.zeros(20)
        assert log_marginal(y, cond, 1.0) > log_marginal(y, cond, 1.5)

    def test_scale_identity_with_noise_ratio_parametrization(self):
        # cov(tau^2 = tau0^2 sigma^2) + sigma^2 I == sigma^2 (tau0^2 cov_unit + I)
        grid = np.linspace(0, 1, 25)
        tau0, h, sigma2 = 1.7, 0.22, 0.4
        t = [0.31, 0.74]
        hyper = KernelHyper.from_noise_ratio(tau0, h, sigma2)
        cond = conditional_moments(grid, t, hyper, jitter=0.0)
        lhs = cond.cov + sigma2 * np.eye(25)
        unit = conditional_moments(grid, t, KernelHyper(tau=1.0, h=h), jitter=0.0)
        rhs = sigma2 * (tau0**2 * unit.cov + np.eye(25))
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10)


class TestSamplePath:
    def test_count_zero_returns_empty(self):
        cond = conditional_moments(np.linspace(0, 1, 20), [0.5], KernelHyper(1.0, 0.3))
        assert sample_path(cond, 0, np.random.default_rng(0)).shape == (0, 20)

    def test_paths_have_flat_derivative_at_constraints(self):
        grid = np.linspace(0, 1, 200)
        hyper = KernelHyper(tau=1.0, h=0.2)
        t = np.array([0.35, 0.75])
        cond = conditional_moments(grid, t, hyper)
        paths = sample_path(cond, 500, np.random.default_rng(11))
        step = grid[1] - grid[0]
        idx = np.searchsorted(grid, t)
        slopes = np.abs(paths[:, idx + 1] - paths[:, idx - 1]) / (2 * step)
        assert slopes.mean() < 0.05 * hyper.tau / hyper.h

    def test_empirical_covariance_matches_moments(self):
        grid = np.linspace(0, 1, 8)
        cond = conditional_moments(grid, [0.45], KernelHyper(tau=1.0, h=0.3))
        draws = sample_path(cond, 20000, np.random.default_rng(5))
        emp = np.cov(draws.T)
        se = np.sqrt(
            (np.outer(np.diag(cond.cov), np.diag(cond.cov)) + cond.cov**2) / 20000
        )
        assert np.all(np.abs(emp - cond.cov) < 3.0 * se + 1e-12)


class TestPosterior:
    def test_noise_free_limit_interpolates_data(self):
        grid = np.linspace(0, 1, 40)
        cond = conditional_moments(grid, [0.5], KernelHyper(tau=1.0, h=0.3))
        rng = np.random.default_rng(3)
        y = sample_path(cond, 1, rng)[0]
        mean, _ = posterior_moments(y, cond, sigma2=1e-10)
        assert np.max(np.abs(mean - y)) < 1e-3

    def test_diffuse_noise_limit_reverts_to_prior_mean(self):
        grid = np.linspace(0, 1, 40)
        cond = conditional_moments(grid, [0.5], KernelHyper(tau=1.0, h=0.3))
        y = np.sin(2 * np.pi * grid)
        mean, _ = posterior_moments(y, cond, sigma2=1e10)
        assert np.max(np.abs(mean)) < 1e-3 * np.linalg.norm(y)

    def test_posterior_variance_below_prior_variance(self):
        grid = np.linspace(0, 1, 30)
        cond = conditional_moments(grid, [0.4, 0.8], KernelHyper(tau=1.3, h=0.25))
        y = np.cos(2 * np.pi * grid)
        _, cov = posterior_moments(y, cond, sigma2=0.3)
        assert np.all(np.diag(cov) <= np.diag(cond.cov) + 1e-10)

    def test_posterior_mean_encodes_flat_derivative(self):
        grid = np.linspace(0, 1, 120)
        hyper = KernelHyper(tau=1.0, h=0.15)
        t = np.array([0.3, 0.72])
        cond = conditional_moments(grid, t, hyper)
        rng = np.random.default_rng(9)
        f = sample_path(cond, 1, rng)[0]
        y = f + 0.1 * rng.standard_normal(f.size)
        mean, _ = posterior_moments(y, cond, sigma2=0.01)
        delta = 1e-4
        lo = conditional_mean_at(t - delta, cond, mean)
        hi = conditional_mean_at(t + delta, cond, mean)
        slopes = np.abs(hi - lo) / (2 * delta)
        grid_slope = np.max(np.abs(np.diff(mean)) / np.diff(grid))
        assert np.all(slopes < 1e-4 * grid_slope + 1e-9)

    def test_posterior_path_count_shapes(self):
        grid = np.linspace(0, 1, 25)
        cond = conditional_moments(grid, [0.5], KernelHyper(tau=1.0, h=0.3))
        y = np.zeros(25)
        assert posterior_path(y, cond, 0.5, 0, np.random.default_rng(0)).shape == (0, 25)
        assert posterior_path(y, cond, 0.5, 7, np.random.default_rng(0)).shape == (7, 25)


class TestConditionalMeanAt:
    def test_reproduces_values_at_grid_points(self):
        grid = np.linspace(0, 1, 60)
        cond = conditional_moments(grid, [0.5], KernelHyper(tau=1.0, h=0.25))
        f = sample_path(cond, 1, np.random.default_rng(21))[0]
        back = conditional_mean_at(grid, cond, f)
        # Reproduction is limited by the stabilizing jitter, not exact.
        assert np.max(np.abs(back - f)) < 1e-3

    def test_batched_values(self):
        grid = np.linspace(0, 1, 40)
        cond = conditional_moments(grid, [0.4], KernelHyper(tau=1.0, h=0.25))
        F = sample_path(cond, 5, np.random.default_rng(22))
        pts = np.array([0.21, 0.55])
        out = conditional_mean_at(pts, cond, F)
        assert out.shape == (5, 2)
        single = conditional_mean_at(pts, cond, F[2])
        np.testing.assert_allclose(out[2], single, atol=1e-10)


class TestMarginalCache:
    def test_matches_dense_log_marginal(self):
        rng = np.random.default_rng(13)
        grid = np.linspace(0, 1, 30)
        tau0, h = 2.2, 0.24
        cache = MarginalCache(grid, tau0=tau0, h=h, jitter=0.0)
        for _ in range(8):
            sigma2 = float(rng.uniform(0.2, 1.5))
            t = np.array([rng.uniform(0.05, 0.45), rng.uniform(0.55, 0.95)])
            y = rng.normal(size=30)
            series = cache.prepare_series(y)
            got = cache.loglik(series, t, sigma2)
            assert got is not None
            hyper = KernelHyper.from_noise_ratio(tau0, h, sigma2)
            cond = conditional_moments(grid, t, hyper, jitter=0.0)
            want = log_marginal(y, cond, sigma2)
            assert got[0] == pytest.approx(want, abs=1e-8)

    def test_batch_matches_scalar_path(self):
        rng = np.random.default_rng(14)
        grid = np.linspace(0, 1, 25)
        cache = MarginalCache(grid, tau0=1.5, h=0.3)
        y = rng.normal(size=25)
        series = cache.prepare_series(y)
        T = np.column_stack(
            [rng.uniform(0.05, 0.45, size=12), rng.uniform(0.55, 0.95, size=12)]
        )
        sig = rng.uniform(0.3, 1.2, size=12)
        batch = cache.loglik_batch(series, T, sig)
        for i in range(12):
            got = cache.loglik(series, T[i], sig[i])
            assert batch[i] == pytest.approx(got[0], abs=1e-9)

    def test_too_close_points_rejected(self):
        grid = np.linspace(0, 1, 25)
        cache = MarginalCache(grid, tau0=1.5, h=0.3)
        series = cache.prepare_series(np.zeros(25))
        assert cache.components(series, [0.5, 0.5 + 1e-6]) is None
