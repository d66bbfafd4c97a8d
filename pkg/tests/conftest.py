"""Shared fixtures: small synthetic datasets that many modules reuse."""

import numpy as np
import pytest

from slam.config import RunConfig
from slam.data_model import SearchWindows, WaveformDataset, encode_design


def sine_cosine_dataset(n=100, subjects=10, sigma=0.25, seed=0):
    """Two-group benchmark data with known stationary points."""
    grid = np.arange(n) / (n - 1)
    rng = np.random.default_rng(seed)
    series = {}
    for s in range(1, subjects + 1):
        f = -2 * np.sin(2 * np.pi * grid + s / 15 - 0.3)
        series[("sine", f"s{s:02d}")] = (grid, f + sigma * rng.standard_normal(n))
    for s in range(1, subjects + 1):
        f = np.cos(2 * np.pi * grid + s / 10 + 1.2) - 3 * grid
        series[("cosine", f"s{s:02d}")] = (grid, f + sigma * rng.standard_normal(n))
    return WaveformDataset.from_series(series)


def sine_truth(subjects=10):
    dips = np.array([(np.pi / 2 + 0.3 - s / 15) / (2 * np.pi) for s in range(1, subjects + 1)])
    peaks = np.array(
        [(3 * np.pi / 2 + 0.3 - s / 15) / (2 * np.pi) for s in range(1, subjects + 1)]
    )
    return dips, peaks


@pytest.fixture(scope="session")
def benchmark_dataset():
    return sine_cosine_dataset()


@pytest.fixture
def standard_windows():
    return SearchWindows(((0.0, 0.5), (0.5, 1.0)))


@pytest.fixture
def benchmark_design(benchmark_dataset):
    return encode_design(benchmark_dataset.groups)


@pytest.fixture
def quick_config():
    return RunConfig(
        windows=((0.0, 0.5), (0.5, 1.0)),
        seed=3,
        estep_draws=300,
        estep_burnin=100,
        mstep_subsample=100,
        max_em_iters=20,
        final_total=400,
        final_burnin=150,
        thin=2,
        chains=2,
        paths_per_chain=50,
    )
