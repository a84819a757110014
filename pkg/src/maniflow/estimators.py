"""Estimator-style wrappers so the flows compose with the wider ecosystem.

Both estimators follow the usual conventions: constructor arguments are
stored verbatim, ``fit`` learns from an ``(n_samples, n_features)`` array,
``score_samples`` returns per-sample log densities, and ``sample`` draws new
points. :class:`ManifoldFlowDensity` additionally acts as a transformer whose
``transform`` projects points onto the learned manifold.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from . import models as md
from . import training as tn
from . import transforms as tr
from .autodiff import ParamStore


def _as_rng(random_state) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)


class _FlowEstimatorBase(BaseEstimator, DensityMixin):
    def _validate(self, X, reset: bool) -> np.ndarray:
        X = check_array(X, dtype=np.float64)
        if reset:
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features; the estimator was fitted with "
                f"{self.n_features_in_}"
            )
        return X

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError("this estimator has not been fitted yet")

    def score_samples(self, X) -> np.ndarray:
        self._check_fitted()
        X = self._validate(X, reset=False)
        return self._log_prob(X)

    def score(self, X, y=None) -> float:
        return float(np.mean(self.score_samples(X)))

    def sample(self, n_samples: int = 1, random_state=None) -> np.ndarray:
        self._check_fitted()
        return self.model_.sample(n_samples, _as_rng(random_state))


class ManifoldFlowDensity(_FlowEstimatorBase, TransformerMixin):
    """Density estimation on a learned embedded manifold.

    ``fit`` trains the flow with the configured schedule; ``transform``
    projects points onto the manifold, ``reconstruction_error`` reports the
    distance moved, and ``score_samples`` evaluates the on-manifold log
    density of the projected points.
    """

    def __init__(
        self,
        manifold_dim: int = 1,
        flow_layers: int = 5,
        latent_layers: int = 5,
        coupling: str = "rq-spline",
        spline_bins: int = 10,
        spline_bound: float = 6.0,
        hidden_units: int = 100,
        residual_blocks: int = 2,
        separate_encoder: bool = False,
        schedule: str = "md-sequential",
        epochs: int = 20,
        batch_size: int = 100,
        learning_rate: float = 3e-4,
        weight_decay: float = 1e-6,
        recon_weight: float = 1000.0,
        validation_fraction: float = 0.1,
        random_state=None,
    ):
        self.manifold_dim = manifold_dim
        self.flow_layers = flow_layers
        self.latent_layers = latent_layers
        self.coupling = coupling
        self.spline_bins = spline_bins
        self.spline_bound = spline_bound
        self.hidden_units = hidden_units
        self.residual_blocks = residual_blocks
        self.separate_encoder = separate_encoder
        self.schedule = schedule
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.recon_weight = recon_weight
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y=None):
        X = self._validate(X, reset=True)
        if self.manifold_dim > X.shape[1]:
            raise ValueError("manifold_dim cannot exceed the number of features")
        rng = _as_rng(self.random_state)
        store = ParamStore()
        kwargs = dict(
            kind=self.coupling, bins=self.spline_bins, bound=self.spline_bound,
            hidden=self.hidden_units, blocks=self.residual_blocks,
        )
        f = tr.coupling_flow(store, "f", X.shape[1], self.flow_layers, rng, **kwargs)
        h = tr.coupling_flow(store, "h", self.manifold_dim, self.latent_layers, rng, **kwargs)
        if self.separate_encoder:
            encoder = tr.ResidualMLP(
                store, "enc", X.shape[1], self.manifold_dim, rng,
                hidden=self.hidden_units, blocks=self.residual_blocks,
                zero_init_output=False,
            )
            self.model_ = md.EncoderManifoldFlow(f, h, encoder, self.manifold_dim, store)
        else:
            self.model_ = md.ManifoldFlow(f, h, self.manifold_dim, store)
        plan = tn.TrainPlan(
            schedule=self.schedule,
            epochs=self.epochs,
            batch_size_manifold=self.batch_size,
            batch_size_density=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            recon_weight=self.recon_weight,
            validation_fraction=self.validation_fraction,
        )
        self.train_log_ = tn.train(self.model_, X, plan, rng)
        return self

    def _log_prob(self, X) -> np.ndarray:
        logp, _ = self.model_.log_prob_and_recon(X)
        return logp.value

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        X = self._validate(X, reset=False)
        _, projected, _ = self.model_.project(X)
        return projected.value

    def reconstruction_error(self, X) -> np.ndarray:
        self._check_fitted()
        X = self._validate(X, reset=False)
        _, _, recon = self.model_.project(X)
        return recon.value

    def latent_codes(self, X) -> np.ndarray:
        self._check_fitted()
        X = self._validate(X, reset=False)
        return self.model_.latent_codes(X).value


class AmbientFlowDensity(_FlowEstimatorBase):
    """Full-dimensional flow density estimator, optionally with a sharply
    peaked base over the trailing latent directions (``epsilon < 1``)."""

    def __init__(
        self,
        flow_layers: int = 10,
        latent_layers: int = 5,
        manifold_dim: int | None = None,
        epsilon: float = 1.0,
        coupling: str = "rq-spline",
        spline_bins: int = 10,
        spline_bound: float = 6.0,
        hidden_units: int = 100,
        residual_blocks: int = 2,
        epochs: int = 20,
        batch_size: int = 100,
        learning_rate: float = 3e-4,
        weight_decay: float = 1e-6,
        validation_fraction: float = 0.1,
        random_state=None,
    ):
        self.flow_layers = flow_layers
        self.latent_layers = latent_layers
        self.manifold_dim = manifold_dim
        self.epsilon = epsilon
        self.coupling = coupling
        self.spline_bins = spline_bins
        self.spline_bound = spline_bound
        self.hidden_units = hidden_units
        self.residual_blocks = residual_blocks
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y=None):
        X = self._validate(X, reset=True)
        rng = _as_rng(self.random_state)
        store = ParamStore()
        kwargs = dict(
            kind=self.coupling, bins=self.spline_bins, bound=self.spline_bound,
            hidden=self.hidden_units, blocks=self.residual_blocks,
        )
        f = tr.coupling_flow(store, "f", X.shape[1], self.flow_layers, rng, **kwargs)
        if self.manifold_dim is None:
            self.model_ = md.AmbientFlow(f, store)
        else:
            h = tr.coupling_flow(
                store, "h", self.manifold_dim, self.latent_layers, rng, **kwargs
            )
            self.model_ = md.PieFlow(f, h, self.manifold_dim, self.epsilon, store)
        plan = tn.TrainPlan(
            schedule="likelihood",
            epochs=self.epochs,
            batch_size_density=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            validation_fraction=self.validation_fraction,
        )
        self.train_log_ = tn.train(self.model_, X, plan, rng)
        return self

    def _log_prob(self, X) -> np.ndarray:
        return self.model_.log_prob(X).value
