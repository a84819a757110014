import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from maniflow import AmbientFlowDensity, ManifoldFlowDensity
from maniflow.datasets import sample_circle

TINY = dict(
    flow_layers=2, latent_layers=1, hidden_units=16, residual_blocks=1,
    spline_bins=5, epochs=4, batch_size=64, random_state=0,
)


class TestManifoldFlowDensity:
    @pytest.fixture(scope="class")
    def fitted(self):
        x = sample_circle(400, np.random.default_rng(0))
        est = ManifoldFlowDensity(manifold_dim=1, **TINY)
        return est.fit(x), x

    def test_attributes(self, fitted):
        est, _ = fitted
        assert est.n_features_in_ == 2
        assert est.model_.n == 1
        assert len(est.train_log_.records) == est.epochs

    def test_transform_projects_onto_manifold(self, fitted):
        est, x = fitted
        projected = est.transform(x[:50])
        assert projected.shape == (50, 2)
        # projected points re-project to themselves
        assert np.max(est.reconstruction_error(projected)) < 1e-8

    def test_score_samples_finite(self, fitted):
        est, x = fitted
        scores = est.score_samples(x[:20])
        assert scores.shape == (20,)
        assert np.all(np.isfinite(scores))
        assert est.score(x[:20]) == pytest.approx(scores.mean())

    def test_sampling_on_manifold(self, fitted):
        est, _ = fitted
        draws = est.sample(64, random_state=1)
        assert draws.shape == (64, 2)
        assert np.max(est.reconstruction_error(draws)) < 1e-6

    def test_latent_codes_shape(self, fitted):
        est, x = fitted
        assert est.latent_codes(x[:10]).shape == (10, 1)

    def test_get_params_and_clone(self):
        est = ManifoldFlowDensity(manifold_dim=2, epochs=7)
        params = est.get_params()
        assert params["manifold_dim"] == 2
        assert params["epochs"] == 7
        twin = clone(est)
        assert twin.get_params() == params

    def test_set_params(self):
        est = ManifoldFlowDensity().set_params(manifold_dim=3, schedule="md-alternating")
        assert est.manifold_dim == 3
        assert est.schedule == "md-alternating"

    def test_unfitted_raises(self):
        with pytest.raises(NotFittedError):
            ManifoldFlowDensity().score_samples(np.zeros((2, 2)))
        with pytest.raises(NotFittedError):
            ManifoldFlowDensity().sample(3)

    def test_feature_mismatch_rejected(self, fitted):
        est, _ = fitted
        with pytest.raises(ValueError):
            est.score_samples(np.zeros((4, 3)))

    def test_manifold_dim_validation(self):
        with pytest.raises(ValueError):
            ManifoldFlowDensity(manifold_dim=5, **TINY).fit(np.zeros((50, 2)))

    def test_input_validation_rejects_nan(self):
        with pytest.raises(ValueError):
            ManifoldFlowDensity(**TINY).fit(np.full((10, 2), np.nan))


class TestAmbientFlowDensity:
    def test_fit_improves_over_identity(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(500, 2)) * np.array([0.3, 2.0])
        est = AmbientFlowDensity(
            flow_layers=3, hidden_units=16, residual_blocks=1, spline_bins=5,
            epochs=6, batch_size=100, random_state=0,
        )
        before = est.__class__(**est.get_params())
        est.fit(x)
        scores = est.score_samples(x)
        # the fitted density beats the standard normal start on average
        base = -0.5 * (2 * np.log(2 * np.pi) + (x**2).sum(axis=1))
        assert scores.mean() > base.mean()

    def test_peaked_base_variant(self):
        rng = np.random.default_rng(3)
        x = np.stack([rng.normal(size=300), 0.01 * rng.normal(size=300)], axis=-1)
        est = AmbientFlowDensity(
            manifold_dim=1, epsilon=0.05, flow_layers=2, latent_layers=1,
            hidden_units=16, residual_blocks=1, spline_bins=5, epochs=3,
            batch_size=64, random_state=1,
        )
        est.fit(x)
        assert est.model_.variant == "pie"
        draws = est.model_.sample(50, np.random.default_rng(0), manifold_only=True)
        # manifold-mode draws sit exactly on the level set v = 0
        from maniflow import autodiff as ad

        z, _ = est.model_.f.inverse(ad.constant(draws))
        assert np.max(np.abs(z.value[:, 1:])) < 1e-8
