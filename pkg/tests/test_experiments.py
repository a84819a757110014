import numpy as np
import pytest

from maniflow import config as cfgmod
from maniflow import experiments as ex
from maniflow import models as md
from maniflow.errors import ConfigError

TINY = {
    "dataset.size": "300",
    "model.flow_layers": "2",
    "model.latent_layers": "1",
    "model.hidden": "16",
    "model.blocks": "1",
    "model.spline_bins": "5",
    "train.epochs": "2",
    "train.batch_size_manifold": "64",
    "train.batch_size_density": "64",
    "eval.sample_count": "200",
    "eval.test_count": "100",
}


def make_cfg(**extra):
    pairs = dict(TINY)
    pairs.update({k: str(v) for k, v in extra.items()})
    return cfgmod.config_from_pairs(pairs)


class TestBuildModel:
    @pytest.mark.parametrize(
        "variant,cls",
        [
            ("ambient", md.AmbientFlow),
            ("pie", md.PieFlow),
            ("manifold", md.ManifoldFlow),
            ("manifold-encoder", md.EncoderManifoldFlow),
            ("prescribed-circle", md.PrescribedManifoldFlow),
        ],
    )
    def test_variants(self, variant, cls):
        cfg = make_cfg(**{"model.variant": variant, "dataset.name": "circle", "model.n": 1})
        model = ex.build_model(cfg, np.random.default_rng(0))
        assert isinstance(model, cls)
        assert model.d == 2

    def test_conditional_wiring(self):
        cfg = make_cfg(**{
            "dataset.name": "surface", "model.variant": "manifold", "model.n": 2,
            "model.conditional": "true",
        })
        model = ex.build_model(cfg, np.random.default_rng(0))
        assert model.context_dim == 1
        assert model.h.context_dim == 1
        assert model.f.context_dim == 0  # manifold stays unconditional

    def test_prescribed_needs_planar_data(self):
        cfg = make_cfg(**{
            "dataset.name": "surface", "model.variant": "prescribed-circle", "model.n": 1,
        })
        with pytest.raises(ConfigError):
            ex.build_model(cfg, np.random.default_rng(0))


class TestMakeDataset:
    def test_circle(self):
        cfg = make_cfg(**{"dataset.name": "circle"})
        bundle = ex.make_dataset(cfg, np.random.default_rng(0))
        assert bundle.x.shape == (300, 2)
        assert bundle.context is None

    def test_surface_conditional(self):
        cfg = make_cfg(**{
            "dataset.name": "surface", "model.n": 2, "model.conditional": "true",
        })
        bundle = ex.make_dataset(cfg, np.random.default_rng(0))
        assert bundle.x.shape == (300, 3)
        assert bundle.context.shape == (300, 1)

    def test_lorenz_stats(self):
        cfg = make_cfg(**{
            "dataset.name": "lorenz", "model.n": 2,
            "dataset.lorenz.trajectories": "5",
            "dataset.lorenz.t_end": "80.0",
            "dataset.size": "400",
        })
        bundle = ex.make_dataset(cfg, np.random.default_rng(0))
        assert bundle.x.shape == (400, 3)
        assert set(bundle.stats) == {"mean", "std"}


class TestEvaluateModel:
    def test_circle_report(self):
        cfg = make_cfg(**{"dataset.name": "circle", "model.variant": "manifold", "model.n": 1})
        model, _, _ = ex.run_training(cfg)
        report = ex.evaluate_model(cfg, model, checkpoint_id="t")
        assert "generated_radius_error" in report.metrics
        assert report.metrics["generated_self_reconstruction"] < 1e-6
        assert "reconstruction_error" in report.metrics
        assert np.isfinite(report.metrics["test_log_prob"])

    def test_surface_report_has_auc(self):
        cfg = make_cfg(**{
            "dataset.name": "surface", "model.variant": "manifold", "model.n": 2,
        })
        model, _, _ = ex.run_training(cfg)
        report = ex.evaluate_model(cfg, model, checkpoint_id="t")
        assert "manifold_distance" in report.metrics
        assert 0.0 <= report.metrics["ood_auc"] <= 1.0


class TestMcmcAdapter:
    def test_latent_shortcut_matches_full_density_up_to_constant(self):
        cfg = make_cfg(**{
            "dataset.name": "surface", "model.variant": "manifold", "model.n": 2,
            "model.conditional": "true",
        })
        model = ex.build_model(cfg, np.random.default_rng(0))
        obs = np.random.default_rng(1).normal(size=(6, 3))
        loglik = ex.mcmc_log_likelihood(model, obs)

        def full(theta):
            logp, _ = model.log_prob_and_recon(obs, theta)
            return float(np.sum(logp.value))

        # theta-independent terms drop out of differences
        for t0, t1 in [(-0.5, 0.5), (0.0, 0.9)]:
            shortcut_diff = loglik(np.array([t0])) - loglik(np.array([t1]))
            full_diff = full(t0) - full(t1)
            assert shortcut_diff == pytest.approx(full_diff, abs=1e-9)

    def test_shortcut_does_not_touch_gram(self):
        cfg = make_cfg(**{
            "dataset.name": "surface", "model.variant": "manifold", "model.n": 2,
            "model.conditional": "true",
        })
        model = ex.build_model(cfg, np.random.default_rng(0))
        obs = np.random.default_rng(2).normal(size=(4, 3))
        loglik = ex.mcmc_log_likelihood(model, obs)
        before = model.gram_evals
        loglik(np.array([0.3]))
        loglik(np.array([-0.3]))
        assert model.gram_evals == before
