"""Invertible building blocks and the padding/projection maps.

Every transform maps latent vectors to data vectors in ``forward`` and back in
``inverse``; both directions return the output together with the
log-absolute-determinant of their own Jacobian, evaluated per sample. All
transforms act on 2-D batches of shape ``(batch, dim)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamStore
from .errors import ContractError, NonFiniteError

MIN_BIN_FRACTION = 1e-3
MIN_DERIVATIVE = 1e-3
# softplus(raw + offset) + MIN_DERIVATIVE == 1 at raw == 0, so zero-initialized
# conditioners start every spline at the identity.
_DERIVATIVE_OFFSET = float(np.log(np.expm1(1.0 - MIN_DERIVATIVE)))
_LOG_SCALE_CAP = 3.0


def pad(u, d: int) -> Node:
    """Zero-pad coordinate vectors up to the ambient dimension."""
    u = ad.as_node(u)
    if u.shape[-1] > d:
        raise ContractError(f"cannot pad {u.shape[-1]} coordinates into {d} dimensions")
    return ad.pad_last(u, d)


def proj(z, n: int) -> Node:
    """Keep the first ``n`` coordinates; the exact left inverse of ``pad``."""
    z = ad.as_node(z)
    if n > z.shape[-1]:
        raise ContractError(f"cannot project {z.shape[-1]} dimensions onto {n}")
    return ad.take_cols(z, np.arange(n))


def _softmax(x: Node, axis: int = -1) -> Node:
    shift = np.max(x.value, axis=axis, keepdims=True)
    e = ad.exp(x - ad.constant(shift))
    return e / ad.sum(e, axis=axis, keepdims=True)


class ResidualMLP:
    """Residual multilayer perceptron used for conditioners and encoders."""

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        hidden: int = 100,
        blocks: int = 2,
        block_depth: int = 2,
        zero_init_output: bool = True,
    ):
        if in_dim < 1:
            raise ContractError("ResidualMLP needs at least one input feature")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w_in = store.create(
            f"{prefix}.in.w", rng.normal(size=(in_dim, hidden)) * np.sqrt(2.0 / in_dim)
        )
        self.b_in = store.create(f"{prefix}.in.b", np.zeros(hidden))
        self.block_weights = []
        scale = np.sqrt(2.0 / hidden)
        for b in range(blocks):
            layers = []
            for l in range(block_depth):
                w = store.create(
                    f"{prefix}.block{b}.l{l}.w", rng.normal(size=(hidden, hidden)) * scale
                )
                bias = store.create(f"{prefix}.block{b}.l{l}.b", np.zeros(hidden))
                layers.append((w, bias))
            self.block_weights.append(layers)
        if zero_init_output:
            w_out = np.zeros((hidden, out_dim))
        else:
            w_out = rng.normal(size=(hidden, out_dim)) * 0.01
        self.w_out = store.create(f"{prefix}.out.w", w_out)
        self.b_out = store.create(f"{prefix}.out.b", np.zeros(out_dim))

    def __call__(self, x: Node) -> Node:
        h = ad.relu(x @ self.w_in + self.b_in)
        for layers in self.block_weights:
            t = h
            for w, b in layers:
                t = ad.relu(t @ w + b)
            h = h + t
        return h @ self.w_out + self.b_out


class Transform:
    """Base invertible map; subclasses implement ``forward`` and ``inverse``."""

    def __init__(self, dim: int, context_dim: int = 0):
        self.dim = dim
        self.context_dim = context_dim

    def _check(self, x: Node, context: Node | None) -> None:
        if x.ndim != 2 or x.shape[-1] != self.dim:
            raise ContractError(f"expected batch of shape (n, {self.dim}), got {x.shape}")
        if self.context_dim > 0:
            if context is None:
                raise ContractError("transform is conditional but no context was given")
            if context.ndim != 2 or context.shape != (x.shape[0], self.context_dim):
                raise ContractError(
                    f"context shape {context.shape} does not match "
                    f"({x.shape[0]}, {self.context_dim})"
                )
        elif context is not None:
            raise ContractError("transform is unconditional but a context was given")

    def forward(self, z: Node, context: Node | None = None) -> tuple[Node, Node]:
        raise NotImplementedError

    def inverse(self, x: Node, context: Node | None = None) -> tuple[Node, Node]:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# rational-quadratic splines


@dataclass(frozen=True)
class SplineParams:
    """Normalized knot data of one monotone rational-quadratic spline.

    ``widths`` and ``heights`` are the absolute bin sizes over ``(-bound,
    bound)``; ``derivatives`` holds the ``bins + 1`` knot derivatives. The
    spline is the identity outside the bound.
    """

    widths: np.ndarray
    heights: np.ndarray
    derivatives: np.ndarray
    bound: float

    def __post_init__(self):
        w = np.asarray(self.widths, dtype=np.float64)
        h = np.asarray(self.heights, dtype=np.float64)
        d = np.asarray(self.derivatives, dtype=np.float64)
        if w.shape != h.shape or d.shape != (w.size + 1,):
            raise ContractError("knot arrays have inconsistent shapes")
        if np.any(w <= 0) or np.any(h <= 0) or np.any(d <= 0):
            raise ContractError("spline knots must be strictly monotone")
        span = 2.0 * self.bound
        if abs(w.sum() - span) > 1e-8 * span or abs(h.sum() - span) > 1e-8 * span:
            raise ContractError("bin sizes must sum to the full spline range")
        object.__setattr__(self, "widths", w)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "derivatives", d)


def _knot_positions(sizes: Node, bound: float) -> Node:
    """Accumulate bin sizes into knot coordinates with exact endpoints."""
    batch_shape = sizes.shape[:-1]
    edge = ad.constant(np.broadcast_to(-bound, batch_shape + (1,)))
    interior = ad.cumsum(sizes, axis=-1) - bound
    interior = ad.take_cols(interior, np.arange(sizes.shape[-1] - 1))
    end = ad.constant(np.broadcast_to(bound, batch_shape + (1,)))
    return ad.concat([edge, interior, end], axis=-1)


def _normalize_raw_spline(raw: Node, bins: int, bound: float) -> tuple[Node, Node, Node]:
    """Map unconstrained conditioner output to knot coordinates/derivatives.

    ``raw`` has shape ``(..., 3 * bins - 1)``: bin widths, bin heights, and
    interior derivatives. Boundary derivatives are pinned to one so the
    identity tails join smoothly.
    """
    k = bins
    raw_w = ad.take_cols(raw, np.arange(0, k))
    raw_h = ad.take_cols(raw, np.arange(k, 2 * k))
    raw_d = ad.take_cols(raw, np.arange(2 * k, 3 * k - 1))
    span = 2.0 * bound
    widths = (MIN_BIN_FRACTION + (1.0 - MIN_BIN_FRACTION * k) * _softmax(raw_w)) * span
    heights = (MIN_BIN_FRACTION + (1.0 - MIN_BIN_FRACTION * k) * _softmax(raw_h)) * span
    knots_x = _knot_positions(widths, bound)
    knots_y = _knot_positions(heights, bound)
    ones = ad.constant(np.ones(raw.shape[:-1] + (1,)))
    inner = MIN_DERIVATIVE + ad.softplus(raw_d + _DERIVATIVE_OFFSET)
    derivs = ad.concat([ones, inner, ones], axis=-1)
    return knots_x, knots_y, derivs


def _gather_bin(knots: Node, idx: np.ndarray) -> Node:
    out = ad.take_along(knots, idx[..., None])
    return ad.reshape(out, idx.shape)


def _rq_spline_apply(
    x: Node, knots_x: Node, knots_y: Node, derivs: Node, bound: float, inverse: bool
) -> tuple[Node, Node]:
    """Monotone rational-quadratic spline with identity tails.

    ``x`` has shape ``(...,)`` matching the leading dimensions of the knot
    arrays ``(..., bins + 1)``. Returns the mapped values and the
    log-derivative of the applied direction.
    """
    inside = np.abs(x.value) < bound
    x_safe = ad.where(inside, x, ad.constant(np.zeros(x.shape)))

    ref = knots_y if inverse else knots_x
    k = ref.shape[-1] - 1
    idx = np.sum(ref.value[..., :-1] <= x_safe.value[..., None], axis=-1) - 1
    idx = np.clip(idx, 0, k - 1)

    xk = _gather_bin(knots_x, idx)
    xk1 = _gather_bin(knots_x, idx + 1)
    yk = _gather_bin(knots_y, idx)
    yk1 = _gather_bin(knots_y, idx + 1)
    dk = _gather_bin(derivs, idx)
    dk1 = _gather_bin(derivs, idx + 1)

    width = xk1 - xk
    slope = (yk1 - yk) / width

    if not inverse:
        xi = (x_safe - xk) / width
    else:
        ydiff = yk1 - yk
        delta = dk1 + dk - 2.0 * slope
        t = x_safe - yk
        a = ydiff * (slope - dk) + t * delta
        b = ydiff * dk - t * delta
        c = -slope * t
        disc = b * b - 4.0 * a * c
        xi = 2.0 * c / (-b - ad.sqrt(disc))

    one_minus = 1.0 - xi
    q = xi * one_minus
    den = slope + (dk1 + dk - 2.0 * slope) * q
    deriv_num = slope * slope * (dk1 * xi * xi + 2.0 * slope * q + dk * one_minus * one_minus)
    log_deriv = ad.log(deriv_num) - 2.0 * ad.log(den)

    if not inverse:
        out = yk + (yk1 - yk) * (slope * xi * xi + dk * q) / den
    else:
        out = xi * width + xk
        log_deriv = -log_deriv

    result = ad.where(inside, out, x)
    log_deriv = ad.where(inside, log_deriv, ad.constant(np.zeros(x.shape)))
    return result, log_deriv


def rq_spline_elementwise(value: float, knots: SplineParams) -> tuple[float, float]:
    """Apply one spline to one scalar; returns the image and log-derivative."""
    kx = _knot_positions(ad.constant(knots.widths[None, :]), knots.bound)
    ky = _knot_positions(ad.constant(knots.heights[None, :]), knots.bound)
    dv = ad.constant(knots.derivatives[None, :])
    out, logd = _rq_spline_apply(
        ad.constant(np.array([value])), kx, ky, dv, knots.bound, inverse=False
    )
    return float(out.value[0]), float(logd.value[0])


def rq_spline_elementwise_inverse(value: float, knots: SplineParams) -> tuple[float, float]:
    """Invert one spline at one scalar; returns preimage and log-derivative."""
    kx = _knot_positions(ad.constant(knots.widths[None, :]), knots.bound)
    ky = _knot_positions(ad.constant(knots.heights[None, :]), knots.bound)
    dv = ad.constant(knots.derivatives[None, :])
    out, logd = _rq_spline_apply(
        ad.constant(np.array([value])), kx, ky, dv, knots.bound, inverse=True
    )
    return float(out.value[0]), float(logd.value[0])


# ---------------------------------------------------------------------------
# coupling layers


def _coupling_split(dim: int, flip: bool) -> tuple[np.ndarray, np.ndarray]:
    half = dim // 2
    first = np.arange(half)
    second = np.arange(half, dim)
    return (second, first) if flip else (first, second)


class _Coupling(Transform):
    """Shared machinery: half the coordinates pass through unchanged and
    parameterize an elementwise transform of the other half."""

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        dim: int,
        rng: np.random.Generator,
        params_per_dim: int,
        flip: bool = False,
        context_dim: int = 0,
        hidden: int = 100,
        blocks: int = 2,
    ):
        if dim < 2:
            raise ContractError("coupling layers need at least two dimensions")
        super().__init__(dim, context_dim)
        self.idx_id, self.idx_tr = _coupling_split(dim, flip)
        self.inverse_order = np.argsort(np.concatenate([self.idx_id, self.idx_tr]))
        self.n_tr = self.idx_tr.size
        self.params_per_dim = params_per_dim
        self.conditioner = ResidualMLP(
            store,
            f"{prefix}.cond",
            in_dim=self.idx_id.size + context_dim,
            out_dim=self.n_tr * params_per_dim,
            rng=rng,
            hidden=hidden,
            blocks=blocks,
        )

    def _raw_params(self, x_id: Node, context: Node | None) -> Node:
        inp = x_id if context is None else ad.concat([x_id, context], axis=-1)
        raw = self.conditioner(inp)
        return ad.reshape(raw, (x_id.shape[0], self.n_tr, self.params_per_dim))

    def _elementwise(self, values: Node, raw: Node, inverse: bool) -> tuple[Node, Node]:
        raise NotImplementedError

    def _apply(self, x: Node, context: Node | None, inverse: bool) -> tuple[Node, Node]:
        self._check(x, context)
        x_id = ad.take_cols(x, self.idx_id)
        x_tr = ad.take_cols(x, self.idx_tr)
        raw = self._raw_params(x_id, context)
        y_tr, log_deriv = self._elementwise(x_tr, raw, inverse)
        out = ad.take_cols(ad.concat([x_id, y_tr], axis=-1), self.inverse_order)
        return out, ad.sum(log_deriv, axis=-1)

    def forward(self, z: Node, context: Node | None = None) -> tuple[Node, Node]:
        return self._apply(z, context, inverse=False)

    def inverse(self, x: Node, context: Node | None = None) -> tuple[Node, Node]:
        return self._apply(x, context, inverse=True)


class AffineCoupling(_Coupling):
    """Coupling whose elementwise map is a shift and a bounded log-scale."""

    def __init__(self, store, prefix, dim, rng, flip=False, context_dim=0, hidden=100, blocks=2):
        super().__init__(
            store, prefix, dim, rng, params_per_dim=2,
            flip=flip, context_dim=context_dim, hidden=hidden, blocks=blocks,
        )

    def _elementwise(self, values: Node, raw: Node, inverse: bool) -> tuple[Node, Node]:
        shape = (values.shape[0], self.n_tr)
        shift = ad.reshape(ad.take_cols(raw, [0]), shape)
        raw_scale = ad.reshape(ad.take_cols(raw, [1]), shape)
        log_scale = _LOG_SCALE_CAP * ad.tanh(raw_scale / _LOG_SCALE_CAP)
        if inverse:
            return (values - shift) * ad.exp(-log_scale), -log_scale
        return values * ad.exp(log_scale) + shift, log_scale


class RQSplineCoupling(_Coupling):
    """Coupling whose elementwise map is a monotone rational-quadratic spline."""

    def __init__(
        self, store, prefix, dim, rng,
        bins: int = 10, bound: float = 6.0,
        flip=False, context_dim=0, hidden=100, blocks=2,
    ):
        super().__init__(
            store, prefix, dim, rng, params_per_dim=3 * bins - 1,
            flip=flip, context_dim=context_dim, hidden=hidden, blocks=blocks,
        )
        self.bins = bins
        self.bound = bound

    def _elementwise(self, values: Node, raw: Node, inverse: bool) -> tuple[Node, Node]:
        kx, ky, dv = _normalize_raw_spline(raw, self.bins, self.bound)
        return _rq_spline_apply(values, kx, ky, dv, self.bound, inverse)


class ElementwiseRQSpline(Transform):
    """Per-dimension spline with free parameters, or parameters produced from
    the context alone; usable at any dimension including one."""

    def __init__(
        self, store, prefix, dim, rng,
        bins: int = 10, bound: float = 6.0,
        context_dim: int = 0, hidden: int = 100, blocks: int = 2,
    ):
        super().__init__(dim, context_dim)
        self.bins = bins
        self.bound = bound
        self._n_raw = 3 * bins - 1
        if context_dim > 0:
            self.conditioner = ResidualMLP(
                store, f"{prefix}.cond", in_dim=context_dim,
                out_dim=dim * self._n_raw, rng=rng, hidden=hidden, blocks=blocks,
            )
            self.raw = None
        else:
            self.conditioner = None
            self.raw = store.create(f"{prefix}.raw", np.zeros((dim, self._n_raw)))

    def _knots(self, batch: int, context: Node | None):
        if self.conditioner is not None:
            raw = ad.reshape(self.conditioner(context), (batch, self.dim, self._n_raw))
        else:
            raw = ad.broadcast_to(
                ad.reshape(self.raw, (1, self.dim, self._n_raw)),
                (batch, self.dim, self._n_raw),
            )
        return _normalize_raw_spline(raw, self.bins, self.bound)

    def _apply(self, x: Node, context: Node | None, inverse: bool) -> tuple[Node, Node]:
        self._check(x, context)
        kx, ky, dv = self._knots(x.shape[0], context)
        out, logd = _rq_spline_apply(x, kx, ky, dv, self.bound, inverse)
        return out, ad.sum(logd, axis=-1)

    def forward(self, z, context=None):
        return self._apply(z, context, inverse=False)

    def inverse(self, x, context=None):
        return self._apply(x, context, inverse=True)


class ElementwiseAffine(Transform):
    """Learnable location and scale per dimension."""

    def __init__(self, store, prefix, dim):
        super().__init__(dim, 0)
        self.loc = store.create(f"{prefix}.loc", np.zeros(dim))
        self.log_scale = store.create(f"{prefix}.log_scale", np.zeros(dim))

    def forward(self, z, context=None):
        self._check(z, context)
        lad = ad.broadcast_to(ad.sum(self.log_scale), (z.shape[0],))
        return z * ad.exp(self.log_scale) + self.loc, lad

    def inverse(self, x, context=None):
        self._check(x, context)
        lad = ad.broadcast_to(-ad.sum(self.log_scale), (x.shape[0],))
        return (x - self.loc) * ad.exp(-self.log_scale), lad


class Permutation(Transform):
    """Fixed feature permutation drawn once at construction."""

    def __init__(self, dim: int, rng: np.random.Generator | None = None, order=None):
        super().__init__(dim, 0)
        if order is not None:
            self.order = np.asarray(order, dtype=np.intp)
        elif rng is not None:
            self.order = rng.permutation(dim)
        else:
            raise ContractError("Permutation needs an rng or an explicit order")
        self.inverse_order = np.argsort(self.order)

    def forward(self, z, context=None):
        self._check(z, context)
        zeros = ad.constant(np.zeros(z.shape[0]))
        return ad.take_cols(z, self.order), zeros

    def inverse(self, x, context=None):
        self._check(x, context)
        zeros = ad.constant(np.zeros(x.shape[0]))
        return ad.take_cols(x, self.inverse_order), zeros


class LULinear(Transform):
    """Invertible linear layer stored in LU-decomposed form.

    The diagonal of the upper factor is kept as log-values, so the layer
    stays invertible and its log-determinant is a cheap sum.
    """

    def __init__(self, store, prefix, dim):
        super().__init__(dim, 0)
        self.raw_l = store.create(f"{prefix}.lower", np.zeros((dim, dim)))
        self.raw_u = store.create(f"{prefix}.upper", np.zeros((dim, dim)))
        self.log_diag = store.create(f"{prefix}.log_diag", np.zeros(dim))
        self._mask_l = np.tril(np.ones((dim, dim)), k=-1)
        self._mask_u = np.triu(np.ones((dim, dim)), k=1)
        self._eye = np.eye(dim)

    def _factors(self) -> tuple[Node, Node]:
        lower = self.raw_l * self._mask_l + self._eye
        diag = self._eye * ad.reshape(ad.exp(self.log_diag), (1, self.dim))
        upper = self.raw_u * self._mask_u + diag
        return lower, upper

    def forward(self, z, context=None):
        self._check(z, context)
        lower, upper = self._factors()
        y = z @ ad.transpose_last(lower @ upper)
        lad = ad.broadcast_to(ad.sum(self.log_diag), (z.shape[0],))
        return y, lad

    def inverse(self, x, context=None):
        self._check(x, context)
        lower, upper = self._factors()
        v = ad.solve_triangular(lower, x, lower=True)
        z = ad.solve_triangular(upper, v, lower=False)
        lad = ad.broadcast_to(-ad.sum(self.log_diag), (x.shape[0],))
        return z, lad


class Chain(Transform):
    """Composition of transforms; log-determinants accumulate additively."""

    def __init__(self, transforms: list[Transform]):
        if not transforms:
            raise ContractError("Chain needs at least one transform")
        dim = transforms[0].dim
        for t in transforms:
            if t.dim != dim:
                raise ContractError("chained transforms must share one dimension")
        context_dim = max(t.context_dim for t in transforms)
        for t in transforms:
            if t.context_dim not in (0, context_dim):
                raise ContractError("conditional transforms must share the context size")
        super().__init__(dim, context_dim)
        self.transforms = list(transforms)

    def _run(self, x: Node, context: Node | None, inverse: bool) -> tuple[Node, Node]:
        total = ad.constant(np.zeros(x.shape[0]))
        seq = reversed(self.transforms) if inverse else self.transforms
        for t in seq:
            ctx = context if t.context_dim > 0 else None
            x, lad = t.inverse(x, ctx) if inverse else t.forward(x, ctx)
            total = total + lad
        if not np.all(np.isfinite(x.value)):
            raise NonFiniteError("transform chain produced non-finite values")
        return x, total

    def forward(self, z, context=None):
        if self.context_dim > 0 and context is None:
            raise ContractError("transform is conditional but no context was given")
        return self._run(ad.as_node(z), context, inverse=False)

    def inverse(self, x, context=None):
        if self.context_dim > 0 and context is None:
            raise ContractError("transform is conditional but no context was given")
        return self._run(ad.as_node(x), context, inverse=True)


def compose(transforms: list[Transform]) -> Chain:
    return Chain(transforms)


def coupling_flow(
    store: ParamStore,
    prefix: str,
    dim: int,
    layers: int,
    rng: np.random.Generator,
    kind: str = "rq-spline",
    bins: int = 10,
    bound: float = 6.0,
    hidden: int = 100,
    blocks: int = 2,
    context_dim: int = 0,
    permute: bool = True,
) -> Chain:
    """Stack of coupling layers alternating with random feature permutations.

    One-dimensional flows fall back to elementwise splines followed by a
    learnable affine map, since couplings need something to condition on.
    """
    parts: list[Transform] = []
    if dim == 1:
        for i in range(layers):
            parts.append(
                ElementwiseRQSpline(
                    store, f"{prefix}.spline{i}", dim, rng,
                    bins=bins, bound=bound, context_dim=context_dim,
                    hidden=hidden, blocks=blocks,
                )
            )
        parts.append(ElementwiseAffine(store, f"{prefix}.affine", dim))
        return Chain(parts)
    for i in range(layers):
        if i > 0 and permute:
            parts.append(Permutation(dim, rng=rng))
        if kind == "rq-spline":
            parts.append(
                RQSplineCoupling(
                    store, f"{prefix}.coupling{i}", dim, rng,
                    bins=bins, bound=bound, flip=bool(i % 2),
                    context_dim=context_dim, hidden=hidden, blocks=blocks,
                )
            )
        elif kind == "affine":
            parts.append(
                AffineCoupling(
                    store, f"{prefix}.coupling{i}", dim, rng,
                    flip=bool(i % 2), context_dim=context_dim,
                    hidden=hidden, blocks=blocks,
                )
            )
        else:
            raise ContractError(f"unknown coupling kind {kind!r}")
    return Chain(parts)
