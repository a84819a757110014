"""Wiring between configurations, datasets, models, training, and metrics."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import datasets as ds
from . import evaluation as ev
from . import models as md
from . import training as tn
from . import transforms as tr
from .autodiff import ParamStore
from .config import ExperimentConfig
from .errors import ConfigError


@dataclass
class DatasetBundle:
    name: str
    x: np.ndarray
    context: np.ndarray | None
    stats: dict[str, np.ndarray]


def make_dataset(cfg: ExperimentConfig, rng: np.random.Generator) -> DatasetBundle:
    if cfg.dataset == "circle":
        return DatasetBundle("circle", ds.sample_circle(cfg.dataset_size, rng), None, {})
    if cfg.dataset == "surface":
        sample = ds.sample_surface(cfg.dataset_size, rng, theta=cfg.dataset_theta)
        context = sample.theta[:, None] if cfg.conditional else None
        return DatasetBundle("surface", sample.x, context, {})
    if cfg.dataset == "lorenz":
        lorenz_cfg = ds.LorenzConfig(
            trajectories=cfg.lorenz_trajectories,
            t_end=cfg.lorenz_t_end,
            warmup=cfg.lorenz_warmup,
        )
        sample = ds.sample_lorenz(cfg.dataset_size, lorenz_cfg, rng)
        stats = {"mean": sample.mean, "std": sample.std}
        return DatasetBundle("lorenz", sample.x, None, stats)
    raise ConfigError(f"unknown dataset {cfg.dataset!r}")


def build_model(cfg: ExperimentConfig, rng: np.random.Generator):
    """Assemble the configured flow variant with freshly initialized weights."""
    cfg.validate()
    store = ParamStore()
    d = cfg.ambient_dim
    n = cfg.manifold_dim
    ctx = cfg.context_dim
    flow_kwargs = dict(
        kind=cfg.coupling, bins=cfg.spline_bins, bound=cfg.spline_bound,
        hidden=cfg.hidden, blocks=cfg.blocks,
    )

    if cfg.variant == "ambient":
        f = tr.coupling_flow(store, "f", d, cfg.flow_layers, rng,
                             context_dim=ctx, **flow_kwargs)
        return md.AmbientFlow(f, store, context_dim=ctx)

    if cfg.variant == "prescribed-circle":
        if d != 2:
            raise ConfigError("the prescribed circle chart needs a planar dataset")
        h = tr.coupling_flow(store, "h", 1, cfg.latent_layers, rng,
                             context_dim=ctx, **flow_kwargs)
        return md.PrescribedManifoldFlow(md.unit_circle_chart(), h, store, context_dim=ctx)

    f_ctx = ctx if cfg.manifold_conditional else 0
    f = tr.coupling_flow(store, "f", d, cfg.flow_layers, rng,
                         context_dim=f_ctx, **flow_kwargs)
    h = tr.coupling_flow(store, "h", n, cfg.latent_layers, rng,
                         context_dim=ctx, **flow_kwargs)

    if cfg.variant == "pie":
        return md.PieFlow(f, h, n, cfg.epsilon, store, context_dim=ctx,
                          manifold_conditional=cfg.manifold_conditional)
    if cfg.variant == "manifold":
        return md.ManifoldFlow(f, h, n, store, context_dim=ctx,
                               manifold_conditional=cfg.manifold_conditional)
    if cfg.variant == "manifold-encoder":
        encoder = tr.ResidualMLP(store, "enc", d, n, rng, hidden=cfg.hidden,
                                 blocks=cfg.blocks, zero_init_output=False)
        return md.EncoderManifoldFlow(f, h, encoder, n, store, context_dim=ctx,
                                      manifold_conditional=cfg.manifold_conditional)
    raise ConfigError(f"unknown variant {cfg.variant!r}")


def make_plan(cfg: ExperimentConfig) -> tn.TrainPlan:
    return tn.TrainPlan(
        schedule=cfg.schedule,
        epochs=cfg.epochs,
        batch_size_manifold=cfg.batch_size_manifold,
        batch_size_density=cfg.batch_size_density,
        batch_size_ot=cfg.batch_size_ot,
        learning_rate=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
        recon_weight=cfg.recon_weight,
        nll_weight=cfg.nll_weight,
        sim_nll_weight=cfg.sim_nll_weight,
        ot_weight=cfg.ot_weight,
        sinkhorn_blur=cfg.sinkhorn_blur,
        validation_fraction=cfg.validation_fraction,
    )


def run_training(cfg: ExperimentConfig):
    """Seeded end-to-end training; returns (model, phase log, dataset)."""
    rng = np.random.default_rng(cfg.seed)
    bundle = make_dataset(cfg, rng)
    model = build_model(cfg, rng)
    log = tn.train(model, bundle.x, make_plan(cfg), rng, context=bundle.context)
    return model, log, bundle


def mean_reconstruction_error(model, x: np.ndarray, context=None) -> float:
    """Mean L2 norm convention (see the metric-report note)."""
    _, _, recon = model.project(x, context)
    return float(np.mean(recon.value))


def mcmc_log_likelihood(model, x_obs: np.ndarray):
    """Conditional log likelihood of an observed set as a function of theta.

    For manifold flows with a context-independent manifold, the projection
    and the Gram volume factor do not depend on theta, so they drop out of
    Metropolis-Hastings acceptance ratios; only the coordinate density is
    evaluated per theta.
    """
    if isinstance(model, md.ManifoldFlow) and not model.manifold_conditional:
        u_obs = model.latent_codes(x_obs).value

        def loglik(theta: np.ndarray) -> float:
            return float(np.sum(model.latent_log_prob(u_obs, theta).value))

        return loglik

    def loglik(theta: np.ndarray) -> float:
        return float(np.sum(model.log_prob(x_obs, theta).value))

    return loglik


def evaluate_model(cfg: ExperimentConfig, model, checkpoint_id: str = "") -> ev.MetricReport:
    """Dataset-appropriate metric bundle for a trained model."""
    rng = np.random.default_rng(cfg.seed + 1)
    report = ev.MetricReport(
        dataset=cfg.dataset, checkpoint=checkpoint_id, seed=cfg.seed,
        notes={"recon_convention": "mean L2 norm over samples"},
    )
    theta_eval = 0.0 if cfg.conditional else None

    generated = model.sample(cfg.eval_sample_count, rng, context=theta_eval)

    if cfg.dataset == "circle":
        report.metrics["generated_radius_error"] = float(
            np.mean(np.abs(np.linalg.norm(generated, axis=-1) - 1.0))
        )
        test = ds.sample_circle(cfg.eval_test_count, rng)
    elif cfg.dataset == "surface":
        report.metrics["manifold_distance"] = float(
            np.mean(ds.surface_distance(generated))
        )
        test = ds.sample_surface(cfg.eval_test_count, rng, theta=0.0).x
    else:
        test = None

    if cfg.dataset == "lorenz":
        test_cfg = replace(cfg, dataset_size=cfg.eval_test_count, seed=cfg.seed + 2)
        test = make_dataset(test_cfg, np.random.default_rng(cfg.seed + 2)).x

    if hasattr(model, "project") and test is not None:
        report.metrics["reconstruction_error"] = mean_reconstruction_error(
            model, test, theta_eval
        )
        _, _, recon_gen = model.project(generated, theta_eval)
        report.metrics["generated_self_reconstruction"] = float(np.mean(recon_gen.value))

    if test is not None:
        logp = _log_prob_values(model, test, theta_eval)
        report.metrics["test_log_prob"] = float(np.mean(logp))
        report.metrics["test_bits_per_dim"] = float(
            np.mean(md.bits_per_dim(logp, model.d))
        )

    if cfg.dataset == "surface":
        ood = ds.surface_ood_sample(cfg.eval_test_count, rng, noise_std=cfg.eval_ood_noise)
        report.metrics["ood_auc"] = ood_auc_best(model, test, ood, theta_eval)

    return report


def _log_prob_values(model, x: np.ndarray, context) -> np.ndarray:
    if isinstance(model, md.ManifoldFlow):
        logp, _ = model.log_prob_and_recon(x, context)
        return logp.value
    return model.log_prob(x, context).value


def ood_auc_best(model, test: np.ndarray, ood: np.ndarray, context=None) -> float:
    """AUC from likelihood scores and, when available, reconstruction scores;
    reports the larger of the two."""
    scores = [
        (-_log_prob_values(model, test, context), -_log_prob_values(model, ood, context))
    ]
    if hasattr(model, "project"):
        _, _, r_in = model.project(test, context)
        _, _, r_out = model.project(ood, context)
        scores.append((r_in.value, r_out.value))
    return max(ev.ood_auc(s_in, s_out) for s_in, s_out in scores)


def run_posterior_mcmc(cfg: ExperimentConfig, model, rng: np.random.Generator):
    """Posterior chains for the conditional surface task: one chain from the
    model likelihood and one from the ground-truth likelihood."""
    if cfg.dataset != "surface" or not cfg.conditional:
        raise ConfigError("posterior sampling is defined for the conditional surface task")
    obs = ds.sample_surface(cfg.mcmc_observed_count, rng, theta=0.0).x
    prior = ev.uniform_log_prior(-1.0, 1.0)
    common = dict(
        steps=cfg.mcmc_steps, step_size=cfg.mcmc_step_size, burn_in=cfg.mcmc_burn_in,
    )
    model_chain = ev.metropolis_hastings(
        mcmc_log_likelihood(model, obs), prior, np.array([0.0]),
        rng=np.random.default_rng(rng.integers(2**32)), **common,
    )
    true_chain = ev.metropolis_hastings(
        lambda t: ds.surface_log_likelihood(obs, float(t[0])), prior, np.array([0.0]),
        rng=np.random.default_rng(rng.integers(2**32)), **common,
    )
    return model_chain, true_chain, obs
