"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

The engine builds an explicit graph of :class:`Node` objects. Each node stores
its value, links to the nodes it was computed from, and one vector-Jacobian
closure per parent. A node may additionally carry a forward-mode ``tangent``:
the tangent of an operation is expressed with the same graph primitives, so a
directional derivative (a Jacobian column of a transform stack) is itself a
graph node and gradients flow through it. That forward-over-reverse layer is
what makes Gram-determinant terms of rectangular Jacobians trainable.

Values are treated as immutable once a node is created; only optimizers
replace the ``value`` of :class:`Parameter` leaves between training steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from .errors import ContractError, DegeneracyError

Array = np.ndarray

# Set while evaluating a tangent rule so nested ops do not propagate tangents
# of their own (only first-order forward derivatives are carried).
_IN_TANGENT_RULE = False


def _asarray(value) -> Array:
    if type(value) is np.ndarray and value.dtype == np.float64:
        return value
    return np.asarray(value, dtype=np.float64)


class Node:
    """A value in the computation graph.

    ``parents`` holds ``(parent, vjp)`` pairs where ``vjp`` maps the output
    cotangent to the parent's cotangent contribution. ``grad`` is populated by
    :func:`backward` on visited nodes, ``tangent`` by forward propagation.
    """

    __slots__ = ("value", "grad", "tangent", "parents")

    # Make numpy defer to the reflected operators instead of broadcasting
    # nodes into object arrays.
    __array_ufunc__ = None

    def __init__(self, value, parents: tuple = ()):
        self.value = _asarray(value)
        self.parents = parents
        self.grad: Array | None = None
        self.tangent: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Node(shape={self.shape}, leaf={not self.parents})"

    # Arithmetic sugar; all lift plain numbers/arrays to constant nodes.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Node):
    """A named leaf node; the unit of optimization and checkpointing."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class ParamStore:
    """Ordered, name-keyed collection of :class:`Parameter` leaves.

    Iteration order is insertion order and therefore stable across runs with
    the same construction sequence, which keeps checkpoints and optimizer
    traversals deterministic.
    """

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self.register(p)

    def create(self, name: str, value) -> Parameter:
        return self.register(Parameter(name, value))

    def register(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ContractError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def names(self) -> list[str]:
        return list(self._params)

    def subset(self, *prefixes: str) -> "ParamStore":
        """Parameters whose name starts with any prefix; shares the leaves."""
        sub = ParamStore()
        for p in self:
            if any(p.name.startswith(pre) for pre in prefixes):
                sub.register(p)
        return sub

    def snapshot(self) -> dict[str, Array]:
        return {p.name: p.value.copy() for p in self}

    def restore(self, arrays: Mapping[str, Array]) -> None:
        for p in self:
            if p.name not in arrays:
                raise ContractError(f"snapshot is missing parameter {p.name!r}")
            value = _asarray(arrays[p.name])
            if value.shape != p.shape:
                raise ContractError(
                    f"snapshot shape {value.shape} != {p.shape} for {p.name!r}"
                )
            p.value = value.copy()


def as_node(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def constant(value) -> Node:
    return Node(value)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast cotangent back to the shape of the input."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(value, parents: tuple, inputs: tuple, tangent_rule: Callable[[], Node | None]) -> Node:
    """Create a node and, outside tangent rules, propagate input tangents."""
    global _IN_TANGENT_RULE
    out = Node(value, parents)
    if not _IN_TANGENT_RULE and any(i.tangent is not None for i in inputs):
        _IN_TANGENT_RULE = True
        try:
            out.tangent = tangent_rule()
        finally:
            _IN_TANGENT_RULE = False
    return out


def with_tangent(x: Node, tangent) -> Node:
    """Identity-wrap ``x`` and attach a forward tangent to the wrapper."""
    t = as_node(tangent)
    if t.shape != x.shape:
        raise ContractError(f"tangent shape {t.shape} != point shape {x.shape}")
    out = Node(x.value, ((x, lambda g: g),))
    out.tangent = t
    return out


def _tangent_or_zero(x: Node) -> Node:
    return x.tangent if x.tangent is not None else constant(np.zeros(x.shape))


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value + b.value,
        (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ),
        (a, b),
        lambda: add(_tangent_or_zero(a), _tangent_or_zero(b)),
    )


def subtract(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value - b.value,
        (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        ),
        (a, b),
        lambda: subtract(_tangent_or_zero(a), _tangent_or_zero(b)),
    )


def multiply(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def tangent() -> Node:
        t = None
        if a.tangent is not None:
            t = multiply(a.tangent, b)
        if b.tangent is not None:
            tb = multiply(a, b.tangent)
            t = tb if t is None else add(t, tb)
        return t

    return _make(
        a.value * b.value,
        (
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ),
        (a, b),
        tangent,
    )


def divide(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    inv = 1.0 / b.value

    def tangent() -> Node:
        t = None
        if a.tangent is not None:
            t = divide(a.tangent, b)
        if b.tangent is not None:
            tb = negative(divide(multiply(a, b.tangent), multiply(b, b)))
            t = tb if t is None else add(t, tb)
        return t

    return _make(
        a.value * inv,
        (
            (a, lambda g: _unbroadcast(g * inv, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.value * inv * inv, b.shape)),
        ),
        (a, b),
        tangent,
    )


def negative(a) -> Node:
    a = as_node(a)
    return _make(
        -a.value,
        ((a, lambda g: -g),),
        (a,),
        lambda: negative(a.tangent),
    )


def power(a, exponent: float) -> Node:
    # Tangent rules below are written with graph ops on the primal nodes (not
    # captured constants) so that reverse passes through a tangent see the
    # full parameter dependence; that is what makes jvp outputs trainable.
    a = as_node(a)
    if isinstance(exponent, Node):
        raise ContractError("power expects a constant exponent")
    c = float(exponent)
    dv = c * a.value ** (c - 1.0)
    return _make(
        a.value ** c,
        ((a, lambda g: g * dv),),
        (a,),
        lambda: multiply(a.tangent, multiply(constant(c), power(a, c - 1.0))),
    )


def exp(a) -> Node:
    a = as_node(a)
    v = np.exp(a.value)
    return _make(
        v,
        ((a, lambda g: g * v),),
        (a,),
        lambda: multiply(a.tangent, exp(a)),
    )


def log(a) -> Node:
    a = as_node(a)
    return _make(
        np.log(a.value),
        ((a, lambda g: g / a.value),),
        (a,),
        lambda: divide(a.tangent, a),
    )


def sqrt(a) -> Node:
    a = as_node(a)
    v = np.sqrt(a.value)
    return _make(
        v,
        ((a, lambda g: g / (2.0 * v)),),
        (a,),
        lambda: divide(a.tangent, multiply(constant(2.0), sqrt(a))),
    )


def tanh(a) -> Node:
    a = as_node(a)
    v = np.tanh(a.value)
    dv = 1.0 - v * v
    return _make(
        v,
        ((a, lambda g: g * dv),),
        (a,),
        lambda: multiply(a.tangent, subtract(constant(1.0), power(tanh(a), 2.0))),
    )


def sin(a) -> Node:
    a = as_node(a)
    return _make(
        np.sin(a.value),
        ((a, lambda g: g * np.cos(a.value)),),
        (a,),
        lambda: multiply(a.tangent, cos(a)),
    )


def cos(a) -> Node:
    a = as_node(a)
    return _make(
        np.cos(a.value),
        ((a, lambda g: -g * np.sin(a.value)),),
        (a,),
        lambda: multiply(a.tangent, negative(sin(a))),
    )


def atan2(y, x) -> Node:
    y, x = as_node(y), as_node(x)
    denom = x.value * x.value + y.value * y.value

    def tangent() -> Node:
        r2 = add(multiply(x, x), multiply(y, y))
        t = None
        if y.tangent is not None:
            t = divide(multiply(y.tangent, x), r2)
        if x.tangent is not None:
            tx = negative(divide(multiply(x.tangent, y), r2))
            t = tx if t is None else add(t, tx)
        return t

    return _make(
        np.arctan2(y.value, x.value),
        (
            (y, lambda g: _unbroadcast(g * x.value / denom, y.shape)),
            (x, lambda g: _unbroadcast(-g * y.value / denom, x.shape)),
        ),
        (y, x),
        tangent,
    )


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    return _make(
        np.where(mask, a.value, 0.0),
        ((a, lambda g: g * mask),),
        (a,),
        lambda: multiply(a.tangent, constant(mask * 1.0)),
    )


def sigmoid(a) -> Node:
    a = as_node(a)
    v = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    dv = v * (1.0 - v)

    def tangent() -> Node:
        s = sigmoid(a)
        return multiply(a.tangent, multiply(s, subtract(constant(1.0), s)))

    return _make(
        v,
        ((a, lambda g: g * dv),),
        (a,),
        tangent,
    )


def softplus(a) -> Node:
    a = as_node(a)
    v = np.logaddexp(0.0, a.value)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(
        v,
        ((a, lambda g: g * s),),
        (a,),
        lambda: multiply(a.tangent, sigmoid(a)),
    )


def where(cond: Array, a, b) -> Node:
    """Select elementwise by a constant boolean mask."""
    a, b = as_node(a), as_node(b)
    mask = np.asarray(cond, dtype=bool)

    def tangent() -> Node:
        return where(mask, _tangent_or_zero(a), _tangent_or_zero(b))

    return _make(
        np.where(mask, a.value, b.value),
        (
            (a, lambda g: _unbroadcast(np.where(mask, g, 0.0), a.shape)),
            (b, lambda g: _unbroadcast(np.where(mask, 0.0, g), b.shape)),
        ),
        (a, b),
        tangent,
    )


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _sum_vjp(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape).copy()


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 - mirrors numpy
    a = as_node(a)
    return _make(
        np.sum(a.value, axis=axis, keepdims=keepdims),
        ((a, lambda g: _sum_vjp(g, a.shape, axis, keepdims)),),
        (a,),
        lambda: sum(a.tangent, axis=axis, keepdims=keepdims),
    )


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    scale = 1.0 / float(count)
    return _make(
        np.mean(a.value, axis=axis, keepdims=keepdims),
        ((a, lambda g: _sum_vjp(g, a.shape, axis, keepdims) * scale),),
        (a,),
        lambda: mean(a.tangent, axis=axis, keepdims=keepdims),
    )


def cumsum(a, axis: int = -1) -> Node:
    a = as_node(a)

    def vjp(g: Array) -> Array:
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return _make(
        np.cumsum(a.value, axis=axis),
        ((a, vjp),),
        (a,),
        lambda: cumsum(a.tangent, axis=axis),
    )


def reshape(a, shape: tuple[int, ...]) -> Node:
    a = as_node(a)
    return _make(
        a.value.reshape(shape),
        ((a, lambda g: g.reshape(a.shape)),),
        (a,),
        lambda: reshape(a.tangent, shape),
    )


def broadcast_to(a, shape: tuple[int, ...]) -> Node:
    a = as_node(a)
    return _make(
        np.broadcast_to(a.value, shape).copy(),
        ((a, lambda g: _unbroadcast(g, a.shape)),),
        (a,),
        lambda: broadcast_to(a.tangent, shape),
    )


def concat(parts: Iterable, axis: int = -1) -> Node:
    nodes = [as_node(p) for p in parts]
    sizes = [n.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i: int):
        def vjp(g: Array) -> Array:
            index = [slice(None)] * g.ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(index)]

        return vjp

    return _make(
        np.concatenate([n.value for n in nodes], axis=axis),
        tuple((n, make_vjp(i)) for i, n in enumerate(nodes)),
        tuple(nodes),
        lambda: concat([_tangent_or_zero(n) for n in nodes], axis=axis),
    )


def take_cols(a, idx) -> Node:
    """Select columns of the last axis by a constant, duplicate-free index."""
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size != np.unique(idx).size:
        raise ContractError("take_cols requires duplicate-free indices")

    def vjp(g: Array) -> Array:
        out = np.zeros(a.shape)
        out[..., idx] = g
        return out

    return _make(
        a.value[..., idx],
        ((a, vjp),),
        (a,),
        lambda: take_cols(a.tangent, idx),
    )


def pad_last(a, total: int) -> Node:
    """Zero-pad the last axis up to length ``total``."""
    a = as_node(a)
    n = a.shape[-1]
    if n > total:
        raise ContractError(f"cannot pad last axis of size {n} down to {total}")
    width = [(0, 0)] * (a.ndim - 1) + [(0, total - n)]
    return _make(
        np.pad(a.value, width),
        ((a, lambda g: g[..., :n]),),
        (a,),
        lambda: pad_last(a.tangent, total),
    )


def take_along(a, idx: Array) -> Node:
    """Gather along the last axis with one constant index per output lane."""
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g: Array) -> Array:
        out = np.zeros(a.shape)
        np.put_along_axis(out, idx, g, axis=-1)
        return out

    return _make(
        np.take_along_axis(a.value, idx, axis=-1),
        ((a, vjp),),
        (a,),
        lambda: take_along(a.tangent, idx),
    )


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def swap(x: Array) -> Array:
        return np.swapaxes(x, -1, -2)

    def tangent() -> Node:
        t = None
        if a.tangent is not None:
            t = matmul(a.tangent, b)
        if b.tangent is not None:
            tb = matmul(a, b.tangent)
            t = tb if t is None else add(t, tb)
        return t

    return _make(
        a.value @ b.value,
        (
            (a, lambda g: _unbroadcast(g @ swap(b.value), a.shape)),
            (b, lambda g: _unbroadcast(swap(a.value) @ g, b.shape)),
        ),
        (a, b),
        tangent,
    )


def transpose_last(a) -> Node:
    a = as_node(a)
    return _make(
        np.swapaxes(a.value, -1, -2),
        ((a, lambda g: np.swapaxes(g, -1, -2)),),
        (a,),
        lambda: transpose_last(a.tangent),
    )


def solve_triangular(t, rhs, lower: bool) -> Node:
    """Solve ``op(T) y_i = rhs_i`` for a batch of row vectors ``rhs``."""
    from scipy.linalg import solve_triangular as _solve

    t, rhs = as_node(t), as_node(rhs)
    y = _solve(t.value, rhs.value.T, lower=lower).T

    def vjp_rhs(g: Array) -> Array:
        return _solve(t.value.T, g.T, lower=not lower).T

    def vjp_t(g: Array) -> Array:
        gb = vjp_rhs(g)
        full = -gb.T @ y
        mask = np.tril(np.ones(t.shape)) if lower else np.triu(np.ones(t.shape))
        return full * mask

    def tangent() -> Node:
        t_rhs = _tangent_or_zero(rhs)
        if t.tangent is not None:
            t_rhs = subtract(t_rhs, matmul(constant(y), transpose_last(t.tangent)))
        return solve_triangular(t, t_rhs, lower=lower)

    return _make(y, ((t, vjp_t), (rhs, vjp_rhs)), (t, rhs), tangent)


def cholesky_logdet(a) -> Node:
    """log det of a batch of symmetric positive-definite matrices.

    The vjp uses the explicit inverse of the *value*, so gradients through
    the returned node are exact; the tangent rule likewise treats the inverse
    as a constant, which is exact for first-order tangents only.
    """
    a = as_node(a)
    try:
        chol = np.linalg.cholesky(a.value)
    except np.linalg.LinAlgError as err:
        raise DegeneracyError(f"Gram matrix is not positive definite: {err}") from err
    v = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    inv = np.linalg.inv(a.value)
    inv = 0.5 * (inv + np.swapaxes(inv, -1, -2))

    def vjp(g: Array) -> Array:
        return g[..., None, None] * inv

    return _make(
        v,
        ((a, vjp),),
        (a,),
        lambda: sum(multiply(a.tangent, constant(inv)), axis=(-2, -1)),
    )


# ---------------------------------------------------------------------------
# graph traversal


def _topological_order(out: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(out: Node, seed: Array | None = None) -> dict[int, Array]:
    """Accumulate cotangents from ``out`` to every reachable node.

    Each node is visited exactly once, in reverse topological order, so
    shared subexpressions accumulate additively. Returns a map from node id
    to gradient; visited nodes also get their ``grad`` attribute set.
    """
    if seed is None:
        seed = np.ones(out.shape)
    order = _topological_order(out)
    grads: dict[int, Array] = {id(out): _asarray(seed)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g
        for parent, vjp in node.parents:
            contribution = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contribution
            else:
                grads[key] = contribution
    return grads


def grad(loss: Node, params: ParamStore | Iterable[Parameter]) -> dict[str, Array]:
    """Gradient of a scalar loss for every parameter (zeros if unused)."""
    if loss.shape != ():
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads = backward(loss)
    out: dict[str, Array] = {}
    for p in params:
        g = grads.get(id(p))
        out[p.name] = g if g is not None else np.zeros(p.shape)
    return out


def jvp(func: Callable[[Node], Node], point, tangent) -> Node:
    """Directional derivative of ``func`` at ``point`` along ``tangent``.

    The result stays in the graph, so second-order gradients flow through it.
    """
    p = as_node(point)
    t = as_node(tangent)
    if t.shape != p.shape:
        raise ContractError(f"tangent shape {t.shape} != point shape {p.shape}")
    out = func(with_tangent(p, t))
    if out.tangent is None:
        return constant(np.zeros(out.shape))
    return out.tangent


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradientCheckReport:
    """Outcome of comparing analytic gradients to central finite differences."""

    max_rel_error: float
    tolerance: float
    worst_param: str
    per_param: dict[str, float] = field(repr=False, default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradient_check(
    func: Callable[[], Node],
    params: ParamStore | Iterable[Parameter],
    tolerance: float = 1e-5,
    step: float = 1e-5,
) -> GradientCheckReport:
    """Compare analytic gradients of a scalar-valued closure against
    central finite differences over every parameter element.
    """
    params = list(params)
    loss = func()
    if loss.shape != ():
        raise ContractError("gradient_check expects a scalar-valued function")
    analytic = grad(loss, params)

    worst = 0.0
    worst_name = ""
    per_param: dict[str, float] = {}
    for p in params:
        base = p.value.copy()
        fd = np.zeros(base.shape)
        flat = fd.reshape(-1)
        base_flat = base.reshape(-1)
        for i in range(base_flat.size):
            orig = base_flat[i]
            base_flat[i] = orig + step
            p.value = base.reshape(p.shape)
            hi = float(func().value)
            base_flat[i] = orig - step
            p.value = base.reshape(p.shape)
            lo = float(func().value)
            base_flat[i] = orig
            flat[i] = (hi - lo) / (2.0 * step)
        p.value = base
        a = analytic[p.name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-6)
        err = float(np.max(np.abs(a - fd) / denom)) if a.size else 0.0
        per_param[p.name] = err
        if err > worst:
            worst, worst_name = err, p.name
    return GradientCheckReport(worst, tolerance, worst_name, per_param)
