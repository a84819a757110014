"""Experiment configuration: flat dotted-key text files with typed access.

The format is one ``key = value`` pair per line, ``#`` comments allowed.
Unknown keys are rejected; command-line overrides use the same syntax.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields

from .errors import ConfigError

DATASETS = ("circle", "surface", "lorenz")
VARIANTS = ("ambient", "pie", "manifold", "manifold-encoder", "prescribed-circle")
COUPLINGS = ("rq-spline", "affine")


@dataclass
class ExperimentConfig:
    """Everything one experiment needs, resolvable from a config file."""

    seed: int = 0
    dataset: str = "circle"
    dataset_size: int = 10_000
    dataset_theta: float | None = None  # fixed context for surface draws
    lorenz_trajectories: int = 100
    lorenz_t_end: float = 1000.0
    lorenz_warmup: float = 50.0

    variant: str = "manifold"
    manifold_dim: int = 1
    flow_layers: int = 5
    latent_layers: int = 5
    coupling: str = "rq-spline"
    spline_bins: int = 10
    spline_bound: float = 6.0
    hidden: int = 100
    blocks: int = 2
    epsilon: float = 0.01
    conditional: bool = False
    manifold_conditional: bool = False

    schedule: str = "md-sequential"
    epochs: int = 50
    batch_size_manifold: int = 100
    batch_size_density: int = 100
    batch_size_ot: int = 1000
    learning_rate: float = 3e-4
    weight_decay: float = 1e-6
    recon_weight: float = 1000.0
    nll_weight: float = 1.0
    sim_nll_weight: float = 0.1
    ot_weight: float = 10.0
    sinkhorn_blur: float = 0.05
    validation_fraction: float = 0.1

    eval_sample_count: int = 10_000
    eval_test_count: int = 2000
    eval_ood_noise: float = 0.1
    mcmc_steps: int = 5000
    mcmc_burn_in: int = 100
    mcmc_step_size: float = 0.15
    mcmc_observed_count: int = 10
    kde_bandwidth: float = 0.1

    landscape_alpha_min: float = 0.01
    landscape_alpha_max: float = math.pi / 2
    landscape_sigma_min: float = 0.01
    landscape_sigma_max: float = 2.0
    landscape_resolution: int = 50
    landscape_data_size: int = 10_000
    landscape_combined_weight: float = 0.2

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; pick one of {DATASETS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; pick one of {VARIANTS}")
        if self.coupling not in COUPLINGS:
            raise ConfigError(f"unknown coupling {self.coupling!r}")
        if self.manifold_dim < 1:
            raise ConfigError("model.n must be at least one")
        if self.manifold_dim > self.ambient_dim:
            raise ConfigError(
                f"model.n = {self.manifold_dim} exceeds the ambient dimension "
                f"{self.ambient_dim} of dataset {self.dataset!r}"
            )
        if not 0.0 < self.epsilon <= 1.0:
            raise ConfigError("model.epsilon must lie in (0, 1]")
        if self.manifold_conditional and not self.conditional:
            raise ConfigError("model.manifold_conditional requires model.conditional")

    @property
    def ambient_dim(self) -> int:
        return {"circle": 2, "surface": 3, "lorenz": 3}[self.dataset]

    @property
    def context_dim(self) -> int:
        return 1 if self.conditional else 0


# mapping between dotted config keys and dataclass fields
_KEY_MAP: dict[str, str] = {
    "seed": "seed",
    "dataset.name": "dataset",
    "dataset.size": "dataset_size",
    "dataset.theta": "dataset_theta",
    "dataset.lorenz.trajectories": "lorenz_trajectories",
    "dataset.lorenz.t_end": "lorenz_t_end",
    "dataset.lorenz.warmup": "lorenz_warmup",
    "model.variant": "variant",
    "model.n": "manifold_dim",
    "model.flow_layers": "flow_layers",
    "model.latent_layers": "latent_layers",
    "model.coupling": "coupling",
    "model.spline_bins": "spline_bins",
    "model.spline_bound": "spline_bound",
    "model.hidden": "hidden",
    "model.blocks": "blocks",
    "model.epsilon": "epsilon",
    "model.conditional": "conditional",
    "model.manifold_conditional": "manifold_conditional",
    "train.schedule": "schedule",
    "train.epochs": "epochs",
    "train.batch_size_manifold": "batch_size_manifold",
    "train.batch_size_density": "batch_size_density",
    "train.batch_size_ot": "batch_size_ot",
    "train.learning_rate": "learning_rate",
    "train.weight_decay": "weight_decay",
    "train.recon_weight": "recon_weight",
    "train.nll_weight": "nll_weight",
    "train.sim_nll_weight": "sim_nll_weight",
    "train.ot_weight": "ot_weight",
    "train.sinkhorn_blur": "sinkhorn_blur",
    "train.validation_fraction": "validation_fraction",
    "eval.sample_count": "eval_sample_count",
    "eval.test_count": "eval_test_count",
    "eval.ood_noise": "eval_ood_noise",
    "eval.mcmc_steps": "mcmc_steps",
    "eval.mcmc_burn_in": "mcmc_burn_in",
    "eval.mcmc_step_size": "mcmc_step_size",
    "eval.mcmc_observed_count": "mcmc_observed_count",
    "eval.kde_bandwidth": "kde_bandwidth",
    "landscape.alpha_min": "landscape_alpha_min",
    "landscape.alpha_max": "landscape_alpha_max",
    "landscape.sigma_min": "landscape_sigma_min",
    "landscape.sigma_max": "landscape_sigma_max",
    "landscape.resolution": "landscape_resolution",
    "landscape.data_size": "landscape_data_size",
    "landscape.combined_weight": "landscape_combined_weight",
}
_FIELD_MAP = {v: k for k, v in _KEY_MAP.items()}
_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_config_text(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def _coerce(key: str, value: str):
    name = _KEY_MAP[key]
    kind = _FIELD_TYPES[name]
    if value == "" or value.lower() == "none":
        return None
    try:
        if kind == "int":
            return int(value)
        if kind == "float" or kind == "float | None":
            return float(value)
        if kind == "bool":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return value
    except ValueError as err:
        raise ConfigError(f"cannot parse {key} = {value!r} as {kind}") from err


def config_from_pairs(pairs: dict[str, str],
                      overrides: dict[str, str] | None = None) -> ExperimentConfig:
    merged = dict(pairs)
    merged.update(overrides or {})
    kwargs = {}
    for key, value in merged.items():
        if key not in _KEY_MAP:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[_KEY_MAP[key]] = _coerce(key, value)
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    with open(path) as fh:
        pairs = parse_config_text(fh.read())
    return config_from_pairs(pairs, overrides)


def config_to_text(cfg: ExperimentConfig) -> str:
    """Canonical flat rendering: sorted keys, one per line."""
    lines = []
    for key in sorted(_KEY_MAP):
        value = getattr(cfg, _KEY_MAP[key])
        lines.append(f"{key} = {'' if value is None else value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()[:16]


def parse_overrides(items: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form KEY=VALUE")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out
