"""Estimator protocol compliance and the fitted-model surface."""

import numpy as np
import pytest
from sklearn.base import clone

from slam.errors import SlamError, ValidationError
from slam.estimator import SlamModel

from conftest import sine_cosine_dataset


@pytest.fixture(scope="module")
def fitted_model():
    model = SlamModel(
        windows=((0.0, 0.5), (0.5, 1.0)),
        seed=31,
        estep_draws=150,
        estep_burnin=50,
        mstep_subsample=50,
        max_em_iters=12,
        final_total=300,
        final_burnin=100,
        thin=2,
        chains=2,
        paths_per_chain=40,
    )
    return model.fit(sine_cosine_dataset(n=60, subjects=2, seed=6))


class TestEstimatorProtocol:
    def test_get_params_round_trip(self):
        model = SlamModel(seed=9, chains=3)
        params = model.get_params()
        assert params["seed"] == 9
        assert params["chains"] == 3
        rebuilt = SlamModel(**params)
        assert rebuilt.get_params() == params

    def test_set_params(self):
        model = SlamModel()
        model.set_params(seed=77, link="probit")
        assert model.seed == 77
        assert model.link == "probit"

    def test_clone_drops_fitted_state(self, fitted_model):
        fresh = clone(fitted_model)
        assert not hasattr(fresh, "pooled_")
        assert fresh.get_params() == fitted_model.get_params()

    def test_fit_requires_dataset(self):
        with pytest.raises(ValidationError):
            SlamModel().fit(np.zeros((10, 3)))

    def test_unfitted_summary_raises(self):
        with pytest.raises(SlamError):
            SlamModel().latency_summary()


class TestFittedSurface:
    def test_learned_attributes(self, fitted_model):
        assert fitted_model.tau0_ > 0
        assert fitted_model.h_ > 0
        assert len(fitted_model.chains_) == 2
        assert fitted_model.pooled_.n_draws == sum(
            c.n_draws for c in fitted_model.chains_
        )
        assert fitted_model.pooled_.paths is not None

    def test_latency_summary_shape(self, fitted_model):
        summary = fitted_model.latency_summary()
        assert len(summary["subjects"]) == 4 * 2  # 4 series x 2 components
        assert len(summary["groups"]) == 2 * 2

    def test_group_contrast(self, fitted_model):
        (res,) = fitted_model.group_contrast([(("sine", 1), ("cosine", 1))])
        assert res.draws.shape[0] == fitted_model.pooled_.n_draws

    def test_amplitude_methods(self, fitted_model):
        peak = fitted_model.amplitude(2, method="max-peak", orientation="peak")
        half = fitted_model.amplitude(2, method="half-integral")
        window = fitted_model.amplitude(1, method="mean-window", window=(0.1, 0.4))
        assert len(peak) == len(half) == len(window) == 4
        with pytest.raises(ValidationError):
            fitted_model.amplitude(1, method="mean-window")
        with pytest.raises(ValidationError):
            fitted_model.amplitude(1, method="nope")

    def test_curve_band_and_predict(self, fitted_model):
        bands = fitted_model.curve_band()
        assert len(bands) == 4
        curves = fitted_model.predict_curves()
        assert set(curves) == {(g, s) for g, s in fitted_model.pooled_.subjects}

    def test_diagnostics(self, fitted_model):
        values = fitted_model.diagnostics()
        assert "sigma2" in values
        assert all(np.isfinite(v) for v in values.values())
