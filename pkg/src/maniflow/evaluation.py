"""Metrics and inference tooling: random-walk MCMC, kernel two-sample
distance, out-of-distribution AUC, kernel posterior evaluation, and
grid-quadrature normalization checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from .errors import ContractError


@dataclass
class Chain:
    """MCMC output; ``samples`` already excludes the burn-in prefix."""

    samples: np.ndarray
    accepted: int
    step_size: float
    burn_in: int

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / max(1, len(self.samples))


def metropolis_hastings(
    log_likelihood: Callable[[np.ndarray], float],
    log_prior: Callable[[np.ndarray], float],
    theta_init: np.ndarray,
    steps: int,
    rng: np.random.Generator,
    step_size: float = 0.15,
    burn_in: int = 100,
) -> Chain:
    """Random-walk sampler with a symmetric Gaussian proposal.

    Proposals are accepted with probability ``min(1, exp(delta))`` where
    ``delta`` is the change in log likelihood plus log prior; the returned
    chain holds ``steps - burn_in`` states and the acceptance count over
    them.
    """
    if steps <= burn_in:
        raise ContractError("steps must exceed burn_in")
    theta = np.atleast_1d(np.asarray(theta_init, dtype=np.float64))
    log_post = log_likelihood(theta) + log_prior(theta)
    if not np.isfinite(log_post):
        raise ContractError("log likelihood is not finite at theta_init")
    kept = np.empty((steps - burn_in, theta.size))
    accepted = 0
    for step in range(steps):
        proposal = theta + step_size * rng.standard_normal(theta.size)
        lp_prior = log_prior(proposal)
        if np.isfinite(lp_prior):
            lp = log_likelihood(proposal) + lp_prior
            if np.log(rng.uniform()) < lp - log_post:
                theta, log_post = proposal, lp
                if step >= burn_in:
                    accepted += 1
        if step >= burn_in:
            kept[step - burn_in] = theta
    return Chain(samples=kept, accepted=accepted, step_size=step_size, burn_in=burn_in)


def uniform_log_prior(low: float, high: float) -> Callable[[np.ndarray], float]:
    width = high - low

    def log_prior(theta: np.ndarray) -> float:
        if np.any(theta < low) or np.any(theta > high):
            return -np.inf
        return -theta.size * np.log(width)

    return log_prior


def median_heuristic_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """Median pairwise distance over the pooled samples."""
    pooled = np.concatenate([a, b], axis=0)
    diff = pooled[:, None, :] - pooled[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    upper = dist[np.triu_indices(len(pooled), k=1)]
    med = float(np.median(upper))
    return med if med > 0 else 1.0


def mmd(a: np.ndarray, b: np.ndarray, bandwidth: float | None = None) -> float:
    """Biased V-statistic squared maximum mean discrepancy with a Gaussian
    kernel; the bandwidth defaults to the median heuristic."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ContractError("sample sets must be nonempty")
    if bandwidth is None:
        bandwidth = median_heuristic_bandwidth(a, b)

    def kernel_mean(x, y):
        sq = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)
        return float(np.mean(np.exp(-sq / (2.0 * bandwidth**2))))

    return kernel_mean(a, a) + kernel_mean(b, b) - 2.0 * kernel_mean(a, b)


def ood_auc(scores_in: np.ndarray, scores_out: np.ndarray) -> float:
    """Probability that a random out-of-distribution score exceeds a random
    in-distribution score, counting ties as one half."""
    scores_in = np.asarray(scores_in, dtype=np.float64).ravel()
    scores_out = np.asarray(scores_out, dtype=np.float64).ravel()
    if scores_in.size == 0 or scores_out.size == 0:
        raise ContractError("score sets must be nonempty")
    pooled = np.concatenate([scores_in, scores_out])
    ranks = rankdata(pooled, method="average")
    rank_sum_out = ranks[scores_in.size :].sum()
    n_out = scores_out.size
    u = rank_sum_out - n_out * (n_out + 1) / 2.0
    return float(u / (scores_in.size * n_out))


def kde_log_posterior(
    chain_samples: np.ndarray, theta_star: np.ndarray, bandwidth: float = 0.1
) -> float:
    """Log of the mean Gaussian-kernel mass the chain places at a point."""
    samples = np.atleast_2d(np.asarray(chain_samples, dtype=np.float64))
    if samples.size == 0:
        raise ContractError("chain must be nonempty")
    theta_star = np.atleast_1d(np.asarray(theta_star, dtype=np.float64))
    k = theta_star.size
    sq = ((samples - theta_star[None, :]) ** 2).sum(axis=-1)
    log_kernel = -0.5 * (k * np.log(2 * np.pi * bandwidth**2) + sq / bandwidth**2)
    return float(logsumexp(log_kernel) - np.log(len(samples)))


def grid_normalization(
    log_prob: Callable[[np.ndarray], np.ndarray],
    bounds: Sequence[tuple[float, float]],
    resolution: int,
    chunk: int = 20_000,
) -> float:
    """Midpoint Riemann sum of ``exp(log_prob)`` over a box, dimension <= 3."""
    if len(bounds) > 3:
        raise ContractError("grid quadrature supports at most three dimensions")
    axes = []
    cell = 1.0
    for lo, hi in bounds:
        edges = np.linspace(lo, hi, resolution + 1)
        axes.append(0.5 * (edges[:-1] + edges[1:]))
        cell *= (hi - lo) / resolution
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=-1)
    total = 0.0
    for lo in range(0, len(points), chunk):
        total += float(np.sum(np.exp(log_prob(points[lo : lo + chunk]))))
    return total * cell


@dataclass
class MetricReport:
    """Metric bundle tagged with the inputs that produced it."""

    dataset: str
    checkpoint: str
    seed: int
    metrics: dict[str, float] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"dataset = {self.dataset}",
            f"checkpoint = {self.checkpoint}",
            f"seed = {self.seed}",
        ]
        lines += [f"{k} = {v!r}" for k, v in sorted(self.metrics.items())]
        lines += [f"# {k}: {v}" for k, v in sorted(self.notes.items())]
        return "\n".join(lines) + "\n"

    def to_csv_row(self) -> tuple[str, str]:
        keys = sorted(self.metrics)
        header = ",".join(["dataset", "checkpoint", "seed"] + keys)
        row = ",".join(
            [self.dataset, self.checkpoint, str(self.seed)]
            + [repr(self.metrics[k]) for k in keys]
        )
        return header, row

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def load_metric_report(path) -> MetricReport:
    dataset, checkpoint, seed = "", "", 0
    metrics: dict[str, float] = {}
    notes: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            notes[key.strip()] = value.strip()
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "dataset":
            dataset = value
        elif key == "checkpoint":
            checkpoint = value
        elif key == "seed":
            seed = int(value)
        else:
            metrics[key] = float(value)
    return MetricReport(dataset=dataset, checkpoint=checkpoint, seed=seed,
                        metrics=metrics, notes=notes)
