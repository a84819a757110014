"""Loss functions, the optimizer, and the training schedules.

Schedules
---------
``md-sequential``   manifold phase (reconstruction, updates the transform that
                    defines the manifold) until half time, then density phase
                    (likelihood, updates only the coordinate flow).
``md-alternating``  the same two phases interleaved epoch by epoch.
``simultaneous``    one combined loss over all parameters, with optional
                    reconstruction-only pre-training and density-only
                    post-training phases.
``ot``              minimize the Sinkhorn divergence between data batches and
                    generated batches, gradients flowing through sampling.
``ot-density``      alternate Sinkhorn epochs with density epochs.
``likelihood``      plain maximum likelihood (the natural way to train the
                    ambient and peaked-base baselines).

Density phases never touch manifold parameters and drop the Gram term, which
changes no gradient of theirs. Model snapshots are taken after every epoch and
the returned model is reverted to the snapshot with the smallest validation
loss among epochs of the final phase kind.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import Node, ParamStore
from .errors import ContractError, NonFiniteError, SolverError, TrainingAbortError
from .models import ManifoldFlow

SCHEDULES = (
    "md-sequential",
    "md-alternating",
    "simultaneous",
    "ot",
    "ot-density",
    "likelihood",
)


@dataclass
class TrainPlan:
    """Schedule descriptor: phases, loss weights, optimizer settings, and the
    checkpoint rule (always revert to the best validation epoch)."""

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
    sinkhorn_max_iter: int = 5000
    sinkhorn_tol: float = 1e-6
    validation_fraction: float = 0.1
    clip_norm: float = 5.0
    pretrain_fraction: float = 0.1
    posttrain_fraction: float = 0.1
    keep_best: bool = True

    def validate(self) -> None:
        if self.schedule not in SCHEDULES:
            raise ContractError(f"unknown schedule {self.schedule!r}; pick one of {SCHEDULES}")
        if self.epochs < 1:
            raise ContractError("epochs must be positive")
        for name in ("batch_size_manifold", "batch_size_density", "batch_size_ot"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if not 0.0 <= self.validation_fraction < 0.5:
            raise ContractError("validation_fraction must lie in [0, 0.5)")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")

    def with_overrides(self, **kwargs) -> "TrainPlan":
        return replace(self, **kwargs)


@dataclass
class PhaseRecord:
    epoch: int
    phase: str
    train_loss: float
    val_loss: float
    seconds: float
    snapshot_id: int


@dataclass
class PhaseLog:
    schedule: str
    records: list[PhaseRecord] = field(default_factory=list)
    restored_epoch: int | None = None

    def phases(self) -> list[str]:
        return [r.phase for r in self.records]

    def rows(self) -> list[dict]:
        return [
            {
                "epoch": r.epoch,
                "phase": r.phase,
                "train_loss": r.train_loss,
                "val_loss": r.val_loss,
                "seconds": r.seconds,
                "snapshot_id": r.snapshot_id,
            }
            for r in self.records
        ]


# ---------------------------------------------------------------------------
# losses


def loss_reconstruction(model: ManifoldFlow, x, context=None, weight: float = 1.0) -> Node:
    """Weighted mean squared projection error; the manifold-phase objective."""
    x = ad.as_node(x)
    if x.shape[0] == 0:
        raise ContractError("batch must be nonempty")
    _, x_proj, _ = model.project(x, context)
    diff = x - x_proj
    return weight * ad.mean(ad.sum(diff * diff, axis=-1))


def loss_nll(model, x, context=None, weight: float = 1.0, include_gram: bool = True) -> Node:
    """Weighted mean negative log likelihood.

    With ``include_gram=False`` (manifold-flow models only) the Gram volume
    term is dropped; that is valid for updates of the coordinate flow, whose
    gradients it cannot change.
    """
    x = ad.as_node(x)
    if x.shape[0] == 0:
        raise ContractError("batch must be nonempty")
    if isinstance(model, ManifoldFlow):
        if include_gram:
            logp, _ = model.log_prob_and_recon(x, context, include_gram=True)
        else:
            u = model.latent_codes(x, context)
            logp = model.latent_log_prob(u, context)
    else:
        logp = model.log_prob(x, context)
    return weight * ad.mean(-logp)


def loss_simultaneous(
    model: ManifoldFlow, x, context=None,
    nll_weight: float = 0.1, recon_weight: float = 1000.0,
) -> Node:
    """Combined objective: weighted negative log likelihood plus weighted mean
    reconstruction error, differentiable through the Gram term."""
    if not isinstance(model, ManifoldFlow):
        raise ContractError("the simultaneous loss applies to manifold-flow models")
    x = ad.as_node(x)
    if x.shape[0] == 0:
        raise ContractError("batch must be nonempty")
    logp, recon = model.log_prob_and_recon(x, context, include_gram=True)
    return nll_weight * ad.mean(-logp) + recon_weight * ad.mean(recon)


# ---------------------------------------------------------------------------
# Sinkhorn divergence


def _half_sq_dist(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return 0.5 * ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)


def _half_sq_dist_node(x, y) -> Node:
    x, y = ad.as_node(x), ad.as_node(y)
    m, n = x.shape[0], y.shape[0]
    xd = ad.reshape(x, (m, 1, x.shape[1]))
    yd = ad.reshape(y, (1, n, y.shape[1]))
    diff = xd - yd
    return 0.5 * ad.sum(diff * diff, axis=-1)


_OVERRELAXATION = 1.5


def _entropic_ot(cost: np.ndarray, blur: float, max_iter: int, tol: float,
                 symmetric: bool = False):
    """Log-domain Sinkhorn with an annealed regularizer.

    Starts from a regularizer at the scale of the cost matrix and halves it
    each sweep down to ``blur``, then polishes until the row-marginal
    residual drops below ``tol``. Cross problems use over-relaxed updates;
    symmetric (self) problems use the averaged fixed-point iteration, which
    is much faster there. Returns the dual value and the plan.
    """
    m, n = cost.shape
    loga = np.full(m, -np.log(m))
    logb = np.full(n, -np.log(n))
    eps_start = max(blur, float(cost.max()) + 1e-12)
    f = np.zeros(m)
    g = np.zeros(n)
    eps = eps_start
    residual = np.inf
    for it in range(max_iter):
        if symmetric:
            f_new = -eps * logsumexp((g[None, :] - cost) / eps + logb[None, :], axis=1)
            f = 0.5 * (f + f_new)
            g = f
        else:
            f_new = -eps * logsumexp((g[None, :] - cost) / eps + logb[None, :], axis=1)
            f = (1.0 - _OVERRELAXATION) * f + _OVERRELAXATION * f_new
            g_new = -eps * logsumexp((f[:, None] - cost) / eps + loga[:, None], axis=0)
            g = (1.0 - _OVERRELAXATION) * g + _OVERRELAXATION * g_new
        if eps > blur:
            eps = max(blur, 0.5 * eps)
            continue
        log_plan = (f[:, None] + g[None, :] - cost) / eps + loga[:, None] + logb[None, :]
        residual = float(np.abs(np.exp(logsumexp(log_plan, axis=1)) - np.exp(loga)).sum())
        if residual < tol:
            plan = np.exp(log_plan)
            value = float(f @ np.exp(loga) + g @ np.exp(logb))
            return value, plan
    raise SolverError(
        f"Sinkhorn did not reach tolerance {tol:g} in {max_iter} iterations "
        f"(residual {residual:.3g})"
    )


def sinkhorn_divergence(
    x: np.ndarray, y: np.ndarray, blur: float = 0.05,
    max_iter: int = 5000, tol: float = 1e-6,
) -> float:
    """Debiased entropy-regularized optimal transport distance between two
    sample sets with cost ``|x - y|^2 / 2``: symmetric, nonnegative, and zero
    for identical empirical measures up to solver tolerance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise ContractError("sample sets must be nonempty")
    if x.shape[1] != y.shape[1]:
        raise ContractError("sample sets must share their dimension")
    if x.shape == y.shape and np.array_equal(x, y):
        return 0.0  # the three terms cancel by definition
    v_xy, _ = _entropic_ot(_half_sq_dist(x, y), blur, max_iter, tol)
    v_xx, _ = _entropic_ot(_half_sq_dist(x, x), blur, max_iter, tol, symmetric=True)
    v_yy, _ = _entropic_ot(_half_sq_dist(y, y), blur, max_iter, tol, symmetric=True)
    return v_xy - 0.5 * v_xx - 0.5 * v_yy


def sinkhorn_divergence_node(
    x, y, blur: float = 0.05, max_iter: int = 5000, tol: float = 1e-6
) -> Node:
    """Graph version of :func:`sinkhorn_divergence`.

    The optimal potentials are computed outside the graph; by the envelope
    theorem the divergence gradient with respect to the sample positions is
    the plan-weighted cost gradient, so the loss is expressed as transport
    plans (constants) contracted with in-graph cost matrices, plus a constant
    correction that restores the exact dual value.
    """
    x, y = ad.as_node(x), ad.as_node(y)
    xv, yv = x.value, y.value
    coincide = xv.shape == yv.shape and np.array_equal(xv, yv)
    v_xy, p_xy = _entropic_ot(_half_sq_dist(xv, yv), blur, max_iter, tol, symmetric=coincide)
    v_xx, p_xx = _entropic_ot(_half_sq_dist(xv, xv), blur, max_iter, tol, symmetric=True)
    v_yy, p_yy = _entropic_ot(_half_sq_dist(yv, yv), blur, max_iter, tol, symmetric=True)
    value = v_xy - 0.5 * v_xx - 0.5 * v_yy
    surrogate = (
        ad.sum(ad.constant(p_xy) * _half_sq_dist_node(x, y))
        - 0.5 * ad.sum(ad.constant(p_xx) * _half_sq_dist_node(x, x))
        - 0.5 * ad.sum(ad.constant(p_yy) * _half_sq_dist_node(y, y))
    )
    return surrogate + (value - float(surrogate.value))


def loss_optimal_transport(
    model, x, context=None, rng: np.random.Generator | None = None,
    weight: float = 10.0, blur: float = 0.05, max_iter: int = 5000, tol: float = 1e-6,
) -> Node:
    """Weighted Sinkhorn divergence between a data batch and an equally sized
    batch generated from the model, with gradients through the samples."""
    x = ad.as_node(x)
    if x.shape[0] == 0:
        raise ContractError("batch must be nonempty")
    if rng is None:
        raise ContractError("the optimal-transport loss needs an rng for sampling")
    draws = model.base_draws(x.shape[0], rng)
    generated = model.generate(draws, context)
    return weight * sinkhorn_divergence_node(
        x, generated, blur=blur, max_iter=max_iter, tol=tol
    )


# ---------------------------------------------------------------------------
# optimizer


def cosine_learning_rate(base: float, step: int, total_steps: int) -> float:
    """Cosine annealing from ``base`` down to zero over ``total_steps``."""
    if total_steps <= 1:
        return base
    t = min(step, total_steps - 1) / (total_steps - 1)
    return base * 0.5 * (1.0 + np.cos(np.pi * t))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm <= 0 or total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(
        self, params: ParamStore, learning_rate: float = 3e-4,
        weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {p.name: np.zeros(p.shape) for p in params}
        self.v = {p.name: np.zeros(p.shape) for p in params}

    def step(self, grads: dict[str, np.ndarray], learning_rate: float | None = None) -> None:
        lr = self.learning_rate if learning_rate is None else learning_rate
        self.step_count += 1
        t = self.step_count
        for p in self.params:
            g = grads[p.name]
            m = self.m[p.name] = self.beta1 * self.m[p.name] + (1 - self.beta1) * g
            v = self.v[p.name] = self.beta2 * self.v[p.name] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.value
            p.value = p.value - lr * update


# ---------------------------------------------------------------------------
# schedule assembly and the training loop


def _phase_sequence(plan: TrainPlan, model) -> list[str]:
    e = plan.epochs
    s = plan.schedule
    if s == "md-sequential":
        first = e // 2 if e > 1 else 1
        return ["manifold"] * first + ["density"] * (e - first)
    if s == "md-alternating":
        return [("manifold" if i % 2 == 0 else "density") for i in range(e)]
    if s == "simultaneous":
        pre = int(round(plan.pretrain_fraction * e))
        post = int(round(plan.posttrain_fraction * e))
        main = max(1, e - pre - post)
        return ["manifold"] * pre + ["simultaneous"] * main + ["density"] * (e - pre - main)
    if s == "ot":
        return ["ot"] * e
    if s == "ot-density":
        return [("ot" if i % 2 == 0 else "density") for i in range(e)]
    if s == "likelihood":
        return ["likelihood"] * e
    raise ContractError(f"unknown schedule {s!r}")


def _phase_targets(model, phase: str) -> ParamStore:
    if phase == "manifold":
        if not isinstance(model, ManifoldFlow):
            raise ContractError("manifold phases require a manifold-flow model")
        return model.manifold_params()
    if phase == "density":
        if isinstance(model, ManifoldFlow):
            return model.density_params()
        if hasattr(model, "density_params"):
            return model.density_params()
        return model.trainable_params()
    return model.trainable_params()


def _phase_batch_size(plan: TrainPlan, phase: str) -> int:
    if phase == "manifold":
        return plan.batch_size_manifold
    if phase == "ot":
        return plan.batch_size_ot
    return plan.batch_size_density


def _phase_loss(model, phase: str, x, context, plan: TrainPlan, rng) -> Node:
    if phase == "manifold":
        return loss_reconstruction(model, x, context, weight=plan.recon_weight)
    if phase == "density":
        return loss_nll(model, x, context, weight=plan.nll_weight, include_gram=False)
    if phase == "likelihood":
        return loss_nll(model, x, context, weight=plan.nll_weight, include_gram=True)
    if phase == "simultaneous":
        return loss_simultaneous(
            model, x, context,
            nll_weight=plan.sim_nll_weight, recon_weight=plan.recon_weight,
        )
    if phase == "ot":
        return loss_optimal_transport(
            model, x, context, rng=rng, weight=plan.ot_weight,
            blur=plan.sinkhorn_blur, max_iter=plan.sinkhorn_max_iter,
            tol=plan.sinkhorn_tol,
        )
    raise ContractError(f"unknown phase {phase!r}")


def _slice_context(context, idx):
    return None if context is None else context[idx]


def train(model, data: np.ndarray, plan: TrainPlan, rng: np.random.Generator,
          context=None) -> PhaseLog:
    """Run one training schedule; the model ends at its best checkpoint.

    ``data`` has shape ``(count, d)``; for conditional models ``context``
    holds one row per sample. A held-out validation split drives the
    checkpoint rule. Non-finite losses abort with a diagnostic snapshot.
    """
    plan.validate()
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ContractError("training data must be a nonempty (count, dim) array")
    if context is not None:
        context = np.asarray(context, dtype=np.float64)
        if context.ndim == 1:
            context = context[:, None]
        if context.shape[0] != data.shape[0]:
            raise ContractError("context must have one row per training sample")

    order = rng.permutation(data.shape[0])
    n_val = int(round(plan.validation_fraction * data.shape[0]))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise ContractError("validation split left no training data")

    phases = _phase_sequence(plan, model)
    kind_totals = {k: phases.count(k) for k in set(phases)}
    kind_seen: dict[str, int] = {}
    optimizers: dict[str, AdamW] = {}
    best: dict[str, tuple[float, int, dict]] = {}
    log = PhaseLog(schedule=plan.schedule)

    steps_per_epoch = {
        k: max(1, int(np.ceil(train_idx.size / _phase_batch_size(plan, k))))
        for k in kind_totals
    }

    for epoch, phase in enumerate(phases):
        start = time.perf_counter()
        targets = _phase_targets(model, phase)
        if phase not in optimizers:
            optimizers[phase] = AdamW(
                targets, learning_rate=plan.learning_rate, weight_decay=plan.weight_decay
            )
        opt = optimizers[phase]
        kind_epoch = kind_seen.get(phase, 0)
        kind_seen[phase] = kind_epoch + 1
        total_kind_steps = kind_totals[phase] * steps_per_epoch[phase]

        perm = rng.permutation(train_idx)
        batch = _phase_batch_size(plan, phase)
        epoch_losses = []
        for step, lo in enumerate(range(0, perm.size, batch)):
            idx = perm[lo : lo + batch]
            try:
                loss = _phase_loss(
                    model, phase, data[idx], _slice_context(context, idx), plan, rng
                )
            except NonFiniteError as err:
                raise TrainingAbortError(
                    f"non-finite values in {phase} phase at epoch {epoch}: {err}",
                    epoch=epoch, phase=phase, snapshot=model.params.snapshot(),
                ) from err
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingAbortError(
                    f"non-finite loss in {phase} phase at epoch {epoch}",
                    epoch=epoch, phase=phase, snapshot=model.params.snapshot(),
                )
            grads = ad.grad(loss, targets)
            grads = clip_gradients(grads, plan.clip_norm)
            lr = cosine_learning_rate(
                plan.learning_rate,
                kind_epoch * steps_per_epoch[phase] + step,
                total_kind_steps,
            )
            opt.step(grads, learning_rate=lr)
            epoch_losses.append(value)

        if val_idx.size:
            val_loss = float(
                _phase_loss(
                    model, phase, data[val_idx], _slice_context(context, val_idx), plan, rng
                ).value
            )
        else:
            val_loss = float(np.mean(epoch_losses))
        if not np.isfinite(val_loss):
            raise TrainingAbortError(
                f"non-finite validation loss in {phase} phase at epoch {epoch}",
                epoch=epoch, phase=phase, snapshot=model.params.snapshot(),
            )

        if plan.keep_best and (phase not in best or val_loss < best[phase][0]):
            best[phase] = (val_loss, epoch, model.params.snapshot())

        log.records.append(
            PhaseRecord(
                epoch=epoch, phase=phase,
                train_loss=float(np.mean(epoch_losses)), val_loss=val_loss,
                seconds=time.perf_counter() - start, snapshot_id=epoch,
            )
        )

        # At the last epoch of a kind in a blocked (sequential) schedule,
        # rewind to that kind's best checkpoint before the next block starts.
        remaining = phases[epoch + 1 :]
        if (
            plan.keep_best
            and phase in best
            and phase not in remaining
            and plan.schedule in ("md-sequential", "simultaneous", "likelihood", "ot")
        ):
            _, best_epoch, snapshot = best[phase]
            model.params.restore(snapshot)
            if not remaining:
                log.restored_epoch = best_epoch

    final_kind = phases[-1]
    if plan.keep_best and log.restored_epoch is None and final_kind in best:
        _, best_epoch, snapshot = best[final_kind]
        model.params.restore(snapshot)
        log.restored_epoch = best_epoch
    return log
