"""Flow models: ambient, peaked-base (PIE), prescribed-chart, and the two
manifold-learning variants.

All models share one convention: transforms map latents to data in
``forward``, densities are evaluated by pulling data back through ``inverse``.
Densities are returned in nats as graph nodes, so every density is
differentiable with respect to the model parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamStore
from .errors import ContractError, OffManifoldError
from .transforms import Chain, ResidualMLP, pad, proj

LOG_2PI = float(np.log(2.0 * np.pi))


def standard_normal_log_density(z: Node) -> Node:
    """Log density of a standard normal, summed over the last axis."""
    k = z.shape[-1]
    return -0.5 * (k * LOG_2PI + ad.sum(z * z, axis=-1))


def scaled_normal_log_density(v: Node, scale: float) -> Node:
    k = v.shape[-1]
    return -0.5 * (k * (LOG_2PI + 2.0 * np.log(scale)) + ad.sum(v * v, axis=-1) / scale**2)


def bits_per_dim(log_prob_nats, dim: int):
    """Negative log likelihood in bits per dimension, the other common unit."""
    return -np.asarray(log_prob_nats) / (dim * np.log(2.0))


class BaseFlow:
    """Shared validation and context handling."""

    variant = "base"

    def __init__(self, params: ParamStore, d: int, context_dim: int = 0):
        self.params = params
        self.d = d
        self.context_dim = context_dim

    def _check_x(self, x) -> Node:
        x = ad.as_node(x)
        if x.ndim != 2 or x.shape[-1] != self.d:
            raise ContractError(f"expected points of shape (n, {self.d}), got {x.shape}")
        return x

    def _context(self, context, batch: int) -> Node | None:
        if self.context_dim == 0:
            if context is not None:
                raise ContractError("model is unconditional but a context was given")
            return None
        if context is None:
            raise ContractError("model is conditional: a context is required")
        if isinstance(context, Node):
            ctx = context
        else:
            arr = np.asarray(context, dtype=np.float64)
            if arr.ndim == 0:
                arr = np.full((batch, self.context_dim), float(arr))
            elif arr.ndim == 1:
                if arr.shape[0] == self.context_dim:
                    arr = np.tile(arr, (batch, 1))
                elif self.context_dim == 1 and arr.shape[0] == batch:
                    arr = arr[:, None]
                else:
                    raise ContractError(f"cannot broadcast context of shape {arr.shape}")
            ctx = ad.constant(arr)
        if ctx.shape != (batch, self.context_dim):
            raise ContractError(
                f"context shape {ctx.shape} != ({batch}, {self.context_dim})"
            )
        return ctx

    def trainable_params(self) -> ParamStore:
        return self.params


class AmbientFlow(BaseFlow):
    """Full-dimensional normalizing flow with a standard normal base."""

    variant = "ambient"

    def __init__(self, transform: Chain, params: ParamStore, context_dim: int = 0):
        super().__init__(params, transform.dim, context_dim)
        self.f = transform
        self.n = transform.dim

    def log_prob(self, x, context=None) -> Node:
        x = self._check_x(x)
        ctx = self._context(context, x.shape[0])
        z, lad = self.f.inverse(x, ctx)
        return standard_normal_log_density(z) + lad

    def generate(self, base_draws: np.ndarray, context=None) -> Node:
        """Push base-density draws to data space; stays in the graph so
        gradients can flow through the sampling path."""
        z = ad.constant(base_draws)
        ctx = self._context(context, z.shape[0])
        x, _ = self.f.forward(z, ctx)
        return x

    def base_draws(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((count, self.d))

    def sample(self, count: int, rng: np.random.Generator, context=None) -> np.ndarray:
        return self.generate(self.base_draws(count, rng), context).value


class PieFlow(BaseFlow):
    """Ambient flow whose off-manifold base density peaks sharply around zero.

    The first ``n`` latents carry the manifold coordinates (their density is
    modeled by the latent flow ``h``), the remaining ``d - n`` latents get a
    normal base with scale ``epsilon``; ``epsilon = 1`` with an identity
    latent flow recovers a plain ambient flow.
    """

    variant = "pie"

    def __init__(
        self,
        transform: Chain,
        latent_flow: Chain,
        n: int,
        epsilon: float,
        params: ParamStore,
        context_dim: int = 0,
        manifold_conditional: bool = False,
    ):
        if not 0.0 < epsilon <= 1.0:
            raise ContractError("epsilon must lie in (0, 1]")
        if latent_flow.dim != n or n > transform.dim:
            raise ContractError("latent flow dimension must equal n <= d")
        super().__init__(params, transform.dim, context_dim)
        self.f = transform
        self.h = latent_flow
        self.n = n
        self.epsilon = epsilon
        self.manifold_conditional = manifold_conditional

    def _ctx_f(self, ctx):
        return ctx if (self.manifold_conditional and self.context_dim) else None

    def _ctx_h(self, ctx):
        return ctx if (self.context_dim and self.h.context_dim) else None

    def latent_log_prob(self, u, context=None) -> Node:
        u = ad.as_node(u)
        ctx = self._context(context, u.shape[0])
        ut, lad = self.h.inverse(u, self._ctx_h(ctx))
        return standard_normal_log_density(ut) + lad

    def log_prob(self, x, context=None) -> Node:
        x = self._check_x(x)
        ctx = self._context(context, x.shape[0])
        z, lad = self.f.inverse(x, self._ctx_f(ctx))
        u = proj(z, self.n)
        v = ad.take_cols(z, np.arange(self.n, self.d))
        ut, lad_h = self.h.inverse(u, self._ctx_h(ctx))
        log_u = standard_normal_log_density(ut) + lad_h
        return log_u + scaled_normal_log_density(v, self.epsilon) + lad

    def slice_log_prob_unnormalized(self, u, context=None) -> Node:
        """Ambient log density restricted to the level set ``v = 0``.

        Normalized over the full space, *not* over the manifold; on-manifold
        differences are meaningful, absolute values are not.
        """
        u = ad.as_node(u)
        if u.ndim != 2 or u.shape[-1] != self.n:
            raise ContractError(f"expected coordinates of shape (n, {self.n})")
        ctx = self._context(context, u.shape[0])
        z = pad(u, self.d)
        _, lad_fwd = self.f.forward(z, self._ctx_f(ctx))
        log_u = self.latent_log_prob(u, context)
        log_v0 = scaled_normal_log_density(
            ad.constant(np.zeros((u.shape[0], self.d - self.n))), self.epsilon
        )
        return log_u + log_v0 - lad_fwd

    def generate(self, base_draws: np.ndarray, context=None) -> Node:
        count = base_draws.shape[0]
        ctx = self._context(context, count)
        ut = ad.constant(base_draws[:, : self.n])
        u, _ = self.h.forward(ut, self._ctx_h(ctx))
        v = ad.constant(self.epsilon * base_draws[:, self.n :])
        z = ad.concat([u, v], axis=-1)
        x, _ = self.f.forward(z, self._ctx_f(ctx))
        return x

    def base_draws(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((count, self.d))

    def sample(
        self, count: int, rng: np.random.Generator, context=None, manifold_only: bool = False
    ) -> np.ndarray:
        draws = self.base_draws(count, rng)
        if manifold_only:
            draws[:, self.n :] = 0.0
        return self.generate(draws, context).value


class ManifoldFlow(BaseFlow):
    """Flow with an n-dimensional learned manifold: the level set ``v = 0`` of
    a d-dimensional diffeomorphism, reached by zero padding.

    Densities live on the manifold and are computed after projecting the
    input onto it; the Euclidean distance moved by the projection is reported
    alongside as the reconstruction error.
    """

    variant = "manifold"

    def __init__(
        self,
        transform: Chain,
        latent_flow: Chain,
        n: int,
        params: ParamStore,
        context_dim: int = 0,
        manifold_conditional: bool = False,
    ):
        if latent_flow.dim != n or n > transform.dim:
            raise ContractError("latent flow dimension must equal n <= d")
        super().__init__(params, transform.dim, context_dim)
        self.f = transform
        self.h = latent_flow
        self.n = n
        self.manifold_conditional = manifold_conditional
        self.gram_evals = 0

    def _ctx_f(self, ctx):
        return ctx if (self.manifold_conditional and self.context_dim) else None

    def _ctx_h(self, ctx):
        return ctx if (self.context_dim and self.h.context_dim) else None

    def _manifold_context(self, context, batch: int) -> Node | None:
        # the projection side only needs a context when the manifold itself
        # is conditional; density-side methods still require one
        if context is None and not self.manifold_conditional:
            return None
        return self._context(context, batch)

    def manifold_params(self) -> ParamStore:
        return self.params.subset("f.", "enc.")

    def density_params(self) -> ParamStore:
        return self.params.subset("h.")

    def _encode(self, x: Node, ctx) -> Node:
        z, _ = self.f.inverse(x, self._ctx_f(ctx))
        return proj(z, self.n)

    def latent_codes(self, x, context=None) -> Node:
        """Manifold coordinates of ``x`` without decoding back to data space."""
        x = self._check_x(x)
        ctx = self._manifold_context(context, x.shape[0])
        return self._encode(x, ctx)

    def decode(self, u, context=None) -> Node:
        """Push manifold coordinates to data space: the learned chart."""
        u = ad.as_node(u)
        ctx = self._manifold_context(context, u.shape[0])
        x, _ = self.f.forward(pad(u, self.d), self._ctx_f(ctx))
        return x

    def project(self, x, context=None) -> tuple[Node, Node, Node]:
        """Coordinates, projected point, and reconstruction error for ``x``."""
        x = self._check_x(x)
        ctx = self._manifold_context(context, x.shape[0])
        u = self._encode(x, ctx)
        x_proj, _ = self.f.forward(pad(u, self.d), self._ctx_f(ctx))
        diff = x - x_proj
        recon = ad.sqrt(ad.sum(diff * diff, axis=-1))
        return u, x_proj, recon

    def gram_logdet(self, u, context=None) -> Node:
        """``-1/2 log det(J^T J)`` of the chart at ``u``.

        The rectangular Jacobian is assembled from ``n`` tangent
        propagations, one per coordinate direction, and the determinant is
        taken through a Cholesky factorization of the n-by-n Gram matrix.
        """
        self.gram_evals += 1
        u = ad.as_node(u)
        ctx = self._manifold_context(context, u.shape[0])
        batch = u.shape[0]
        cols = []
        for i in range(self.n):
            seed = np.zeros((batch, self.n))
            seed[:, i] = 1.0
            u_dir = ad.with_tangent(u, ad.constant(seed))
            x, _ = self.f.forward(pad(u_dir, self.d), self._ctx_f(ctx))
            cols.append(ad.reshape(x.tangent, (batch, self.d, 1)))
        jac = ad.concat(cols, axis=2)
        gram = ad.transpose_last(jac) @ jac
        return -0.5 * ad.cholesky_logdet(gram)

    def latent_log_prob(self, u, context=None) -> Node:
        """Log density of the coordinate flow alone (no volume correction)."""
        u = ad.as_node(u)
        ctx = self._context(context, u.shape[0])
        ut, lad = self.h.inverse(u, self._ctx_h(ctx))
        return standard_normal_log_density(ut) + lad

    def log_prob_and_recon(self, x, context=None, include_gram: bool = True):
        u, _, recon = self.project(x, context)
        logp = self.latent_log_prob(u, context)
        if include_gram:
            logp = logp + self.gram_logdet(u, context)
        return logp, recon

    def log_prob(self, x, context=None) -> Node:
        logp, _ = self.log_prob_and_recon(x, context)
        return logp

    def log_ratio(self, x, context0, context1) -> Node:
        """Log density ratio between two contexts, skipping the Gram term.

        Valid only when the manifold itself does not depend on the context:
        the projection and the volume factor then cancel exactly.
        """
        if self.manifold_conditional:
            raise ContractError(
                "log_ratio requires a context-independent manifold "
                "(manifold_conditional=False)"
            )
        if self.context_dim == 0:
            raise ContractError("log_ratio needs a conditional density")
        x = self._check_x(x)
        u = self._encode(x, None)
        return self.latent_log_prob(u, context0) - self.latent_log_prob(u, context1)

    def generate(self, base_draws: np.ndarray, context=None) -> Node:
        ctx = self._context(context, base_draws.shape[0])
        u, _ = self.h.forward(ad.constant(base_draws), self._ctx_h(ctx))
        x, _ = self.f.forward(pad(u, self.d), self._ctx_f(ctx))
        return x

    def base_draws(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((count, self.n))

    def sample(self, count: int, rng: np.random.Generator, context=None) -> np.ndarray:
        return self.generate(self.base_draws(count, rng), context).value


class EncoderManifoldFlow(ManifoldFlow):
    """Manifold flow whose projection uses a free-form encoder network
    instead of inverting the chart-defining transform."""

    variant = "manifold-encoder"

    def __init__(
        self,
        transform: Chain,
        latent_flow: Chain,
        encoder: ResidualMLP,
        n: int,
        params: ParamStore,
        context_dim: int = 0,
        manifold_conditional: bool = False,
    ):
        super().__init__(
            transform, latent_flow, n, params,
            context_dim=context_dim, manifold_conditional=manifold_conditional,
        )
        if encoder.out_dim != n:
            raise ContractError("encoder output dimension must equal n")
        self.encoder = encoder

    def _encode(self, x: Node, ctx) -> Node:
        u = self.encoder(x)
        if not np.all(np.isfinite(u.value)):
            raise ContractError("encoder produced non-finite coordinates")
        return u


@dataclass(frozen=True)
class PrescribedChart:
    """Closed-form chart of a known manifold with its analytic Jacobian."""

    n: int
    d: int
    forward: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]


def unit_circle_chart() -> PrescribedChart:
    """Angle parameterization of the unit circle in the plane."""

    def fwd(u):
        phi = u[:, 0]
        return np.stack([np.cos(phi), np.sin(phi)], axis=-1)

    def jac(u):
        phi = u[:, 0]
        return np.stack([-np.sin(phi), np.cos(phi)], axis=-1)[:, :, None]

    def inv(x):
        return np.arctan2(x[:, 1], x[:, 0])[:, None]

    return PrescribedChart(n=1, d=2, forward=fwd, jacobian=jac, inverse=inv)


class PrescribedManifoldFlow(BaseFlow):
    """Density on a manifold whose chart is known in closed form; only the
    coordinate density is learned."""

    variant = "prescribed"

    def __init__(
        self,
        chart: PrescribedChart,
        latent_flow: Chain,
        params: ParamStore,
        context_dim: int = 0,
        tolerance: float = 1e-6,
    ):
        if latent_flow.dim != chart.n:
            raise ContractError("latent flow dimension must equal the chart dimension")
        super().__init__(params, chart.d, context_dim)
        self.chart = chart
        self.h = latent_flow
        self.n = chart.n
        self.tolerance = tolerance

    def latent_log_prob(self, u, context=None) -> Node:
        u = ad.as_node(u)
        ctx = self._context(context, u.shape[0])
        ut, lad = self.h.inverse(u, ctx)
        return standard_normal_log_density(ut) + lad

    def chart_gram_logdet(self, u_values: np.ndarray) -> np.ndarray:
        jac = self.chart.jacobian(u_values)
        gram = np.swapaxes(jac, -1, -2) @ jac
        sign, logdet = np.linalg.slogdet(gram)
        if np.any(sign <= 0):
            raise ContractError("chart Jacobian is rank deficient")
        return -0.5 * logdet

    def log_prob(self, x, context=None) -> Node:
        x = self._check_x(x)
        u_values = self.chart.inverse(x.value)
        residual = np.linalg.norm(self.chart.forward(u_values) - x.value, axis=-1)
        if np.any(residual > self.tolerance):
            raise OffManifoldError(
                f"point is {residual.max():.3g} from the prescribed manifold "
                f"(tolerance {self.tolerance:g})"
            )
        logp = self.latent_log_prob(ad.constant(u_values), context)
        return logp + ad.constant(self.chart_gram_logdet(u_values))

    def sample(self, count: int, rng: np.random.Generator, context=None) -> np.ndarray:
        ctx = self._context(context, count)
        ut = rng.standard_normal((count, self.n))
        u, _ = self.h.forward(ad.constant(ut), ctx)
        return self.chart.forward(u.value)

    def density_params(self) -> ParamStore:
        return self.params.subset("h.")
