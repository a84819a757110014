import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maniflow import autodiff as ad
from maniflow import transforms as tr
from maniflow.errors import ContractError

RNG = lambda seed=0: np.random.default_rng(seed)


def randomize(store, rng, scale=0.3):
    """Perturb parameters into a trained-like regime (non-identity, moderate
    spline slopes): conditioner trunks keep their He init, only their output
    layers and free transform parameters move."""
    for p in store:
        if ".in." in p.name or ".block" in p.name:
            continue
        p.value = p.value + rng.normal(size=p.shape) * scale


def fd_jacobian(fn, x, eps=1e-6):
    d = x.size
    jac = np.zeros((fn(x).size, d))
    for i in range(d):
        hi, lo = x.copy(), x.copy()
        hi[i] += eps
        lo[i] -= eps
        jac[:, i] = (fn(hi) - fn(lo)) / (2 * eps)
    return jac


class TestPadProj:
    def test_pad_basic(self):
        out = tr.pad(np.array([[1.0, 2.0]]), 4)
        np.testing.assert_array_equal(out.value, [[1.0, 2.0, 0.0, 0.0]])

    def test_pad_degenerate_empty(self):
        out = tr.pad(np.zeros((3, 0)), 2)
        np.testing.assert_array_equal(out.value, np.zeros((3, 2)))

    def test_pad_identity_when_same_dim(self):
        x = np.array([[0.5, -0.5]])
        np.testing.assert_array_equal(tr.pad(x, 2).value, x)

    def test_pad_rejects_shrink(self):
        with pytest.raises(ContractError):
            tr.pad(np.zeros((1, 3)), 2)

    def test_proj_basic(self):
        out = tr.proj(np.array([[1.0, 2.0, 0.3, -0.7]]), 2)
        np.testing.assert_array_equal(out.value, [[1.0, 2.0]])

    def test_proj_pad_roundtrip(self):
        rng = RNG(1)
        u = rng.normal(size=(100, 3))
        out = tr.proj(tr.pad(u, 7), 3)
        np.testing.assert_array_equal(out.value, u)

    def test_proj_identity_when_same_dim(self):
        x = np.array([[1.0, 2.0]])
        np.testing.assert_array_equal(tr.proj(x, 2).value, x)

    def test_proj_rejects_grow(self):
        with pytest.raises(ContractError):
            tr.proj(np.zeros((1, 2)), 3)


class TestSplineParams:
    def test_identity_scalar(self):
        knots = tr.SplineParams(
            widths=np.full(4, 0.5), heights=np.full(4, 0.5),
            derivatives=np.ones(5), bound=1.0,
        )
        out, logd = tr.rq_spline_elementwise(0.3, knots)
        assert out == pytest.approx(0.3, abs=1e-12)
        assert logd == pytest.approx(0.0, abs=1e-12)

    def test_identity_at_07_default_range(self):
        bound = 6.0
        k = 10
        knots = tr.SplineParams(
            widths=np.full(k, 2 * bound / k), heights=np.full(k, 2 * bound / k),
            derivatives=np.ones(k + 1), bound=bound,
        )
        out, logd = tr.rq_spline_elementwise(0.7, knots)
        assert out == pytest.approx(0.7, abs=1e-12)
        assert logd == pytest.approx(0.0, abs=1e-12)

    def test_single_bin_roundtrip(self):
        knots = tr.SplineParams(
            widths=np.array([2.0]), heights=np.array([2.0]),
            derivatives=np.array([2.0, 2.0]), bound=1.0,
        )
        y, logd_f = tr.rq_spline_elementwise(0.3, knots)
        back, logd_i = tr.rq_spline_elementwise_inverse(y, knots)
        assert back == pytest.approx(0.3, abs=1e-10)
        assert logd_f == pytest.approx(-logd_i, abs=1e-10)

    def test_random_monotone_knots_derivative_oracle(self):
        rng = RNG(3)
        for _ in range(20):
            k = 6
            w = rng.uniform(0.2, 1.0, size=k)
            w = w / w.sum() * 4.0
            h = rng.uniform(0.2, 1.0, size=k)
            h = h / h.sum() * 4.0
            d = rng.uniform(0.3, 3.0, size=k + 1)
            knots = tr.SplineParams(widths=w, heights=h, derivatives=d, bound=2.0)
            x = rng.uniform(-1.9, 1.9)
            _, logd = tr.rq_spline_elementwise(x, knots)
            eps = 1e-6
            hi, _ = tr.rq_spline_elementwise(x + eps, knots)
            lo, _ = tr.rq_spline_elementwise(x - eps, knots)
            numeric = (hi - lo) / (2 * eps)
            assert np.exp(logd) == pytest.approx(numeric, rel=1e-6)

    def test_non_monotone_rejected(self):
        with pytest.raises(ContractError):
            tr.SplineParams(
                widths=np.array([1.0, -0.5, 1.5]), heights=np.full(3, 2 / 3),
                derivatives=np.ones(4), bound=1.0,
            )
        with pytest.raises(ContractError):
            tr.SplineParams(
                widths=np.full(2, 1.0), heights=np.full(2, 1.0),
                derivatives=np.array([1.0, -1.0, 1.0]), bound=1.0,
            )

    def test_identity_tails(self):
        knots = tr.SplineParams(
            widths=np.full(5, 2.4), heights=np.full(5, 2.4),
            derivatives=np.ones(6), bound=6.0,
        )
        out, logd = tr.rq_spline_elementwise(7.0, knots)
        assert out == 7.0
        assert logd == 0.0


def build_layer(kind, dim, seed=0, context_dim=0, identity=False):
    store = ad.ParamStore()
    rng = RNG(seed)
    if kind == "affine-coupling":
        t = tr.AffineCoupling(store, "t", dim, rng, context_dim=context_dim, hidden=16, blocks=1)
    elif kind == "rq-spline-coupling":
        t = tr.RQSplineCoupling(
            store, "t", dim, rng, bins=5, bound=4.0, context_dim=context_dim,
            hidden=16, blocks=1,
        )
    elif kind == "elementwise-spline":
        t = tr.ElementwiseRQSpline(
            store, "t", dim, rng, bins=5, bound=4.0, context_dim=context_dim,
            hidden=16, blocks=1,
        )
    elif kind == "elementwise-affine":
        t = tr.ElementwiseAffine(store, "t", dim)
    elif kind == "lu-linear":
        t = tr.LULinear(store, "t", dim)
    elif kind == "permutation":
        t = tr.Permutation(dim, rng=rng)
    else:
        raise ValueError(kind)
    if not identity:
        randomize(store, RNG(seed + 100))
    return t, store


ALL_KINDS = [
    "affine-coupling", "rq-spline-coupling", "elementwise-spline",
    "elementwise-affine", "lu-linear", "permutation",
]


class TestForwardExamples:
    def test_zero_initialized_affine_coupling_is_identity(self):
        t, _ = build_layer("affine-coupling", 2, identity=True)
        x, lad = t.forward(ad.constant([[1.5, -0.2]]))
        np.testing.assert_allclose(x.value, [[1.5, -0.2]])
        np.testing.assert_allclose(lad.value, [0.0])

    def test_zero_initialized_spline_coupling_is_identity(self):
        t, _ = build_layer("rq-spline-coupling", 3, identity=True)
        z = np.array([[0.3, -1.2, 2.0]])
        x, lad = t.forward(ad.constant(z))
        np.testing.assert_allclose(x.value, z, atol=1e-12)
        np.testing.assert_allclose(lad.value, [0.0], atol=1e-12)

    def test_lu_linear_diagonal(self):
        t, store = build_layer("lu-linear", 2, identity=True)
        store["t.log_diag"].value = np.log(np.array([2.0, 3.0]))
        x, lad = t.forward(ad.constant([[1.0, 1.0]]))
        np.testing.assert_allclose(x.value, [[2.0, 3.0]])
        assert lad.value[0] == pytest.approx(np.log(6.0))

    def test_permutation_swap(self):
        t = tr.Permutation(2, order=[1, 0])
        x, lad = t.forward(ad.constant([[1.0, 2.0]]))
        np.testing.assert_array_equal(x.value, [[2.0, 1.0]])
        assert lad.value[0] == 0.0

    def test_spline_coupling_identity_tails(self):
        t, _ = build_layer("rq-spline-coupling", 2, seed=5)
        x = np.array([[7.0, 7.0]])  # outside the bound 4.0 in both halves
        out, lad = t.forward(ad.constant(x))
        np.testing.assert_allclose(out.value, x)
        np.testing.assert_allclose(lad.value, [0.0])


class TestRoundTrip:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    @pytest.mark.parametrize("dim", [2, 3])
    def test_inverse_of_forward(self, kind, dim):
        t, _ = build_layer(kind, dim, seed=dim)
        rng = RNG(42)
        z = rng.normal(size=(1000, dim))
        ctx = None
        x, lad_f = t.forward(ad.constant(z), ctx)
        back, lad_i = t.inverse(x, ctx)
        assert np.max(np.abs(back.value - z)) < 1e-8
        np.testing.assert_allclose(lad_f.value, -lad_i.value, atol=1e-9)

    def test_conditional_roundtrip(self):
        t, _ = build_layer("rq-spline-coupling", 3, seed=9, context_dim=2)
        rng = RNG(43)
        z = rng.normal(size=(200, 3))
        ctx = ad.constant(rng.normal(size=(200, 2)))
        x, _ = t.forward(ad.constant(z), ctx)
        back, _ = t.inverse(x, ctx)
        assert np.max(np.abs(back.value - z)) < 1e-8

    def test_ten_layer_spline_stack(self):
        store = ad.ParamStore()
        chain = tr.coupling_flow(
            store, "f", dim=3, layers=10, rng=RNG(7), bins=5, bound=6.0,
            hidden=16, blocks=1,
        )
        randomize(store, RNG(8), scale=0.05)
        z = RNG(44).normal(size=(500, 3))
        x, _ = chain.forward(ad.constant(z))
        back, _ = chain.inverse(x)
        assert np.max(np.abs(back.value - z)) < 1e-6


class TestDeterminants:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_logabsdet_matches_fd_jacobian(self, kind):
        dim = 3
        t, _ = build_layer(kind, dim, seed=11)

        def fn(v):
            out, _ = t.forward(ad.constant(v.reshape(1, dim)))
            return out.value.ravel()

        rng = RNG(45)
        for _ in range(5):
            z = rng.normal(size=dim)
            _, lad = t.forward(ad.constant(z.reshape(1, dim)))
            jac = fd_jacobian(fn, z)
            expected = np.linalg.slogdet(jac)[1]
            assert lad.value[0] == pytest.approx(expected, abs=1e-5)

    def test_five_dim_chain_fd_jacobian(self):
        store = ad.ParamStore()
        chain = tr.coupling_flow(
            store, "f", dim=5, layers=3, rng=RNG(21), bins=4, bound=6.0,
            hidden=12, blocks=1,
        )
        randomize(store, RNG(22), scale=0.05)

        def fn(v):
            out, _ = chain.forward(ad.constant(v.reshape(1, 5)))
            return out.value.ravel()

        z = RNG(46).normal(size=5)
        _, lad = chain.forward(ad.constant(z.reshape(1, 5)))
        expected = np.linalg.slogdet(fd_jacobian(fn, z))[1]
        assert lad.value[0] == pytest.approx(expected, abs=1e-5)


class TestComposition:
    def test_two_diagonal_scalings(self):
        store = ad.ParamStore()
        t1 = tr.ElementwiseAffine(store, "a", 2)
        t2 = tr.ElementwiseAffine(store, "b", 2)
        store["a.log_scale"].value = np.log(np.array([2.0, 1.0]))
        store["b.log_scale"].value = np.log(np.array([3.0, 1.0]))
        chain = tr.compose([t1, t2])
        _, lad = chain.forward(ad.constant([[1.0, 1.0]]))
        assert lad.value[0] == pytest.approx(np.log(6.0))

    def test_chain_forward_then_inverse_is_identity(self):
        store = ad.ParamStore()
        chain = tr.coupling_flow(
            store, "f", dim=2, layers=4, rng=RNG(31), bins=5, bound=6.0,
            hidden=16, blocks=1,
        )
        randomize(store, RNG(32), scale=0.05)
        z = RNG(47).normal(size=(300, 2))
        x, lad_f = chain.forward(ad.constant(z))
        back, lad_i = chain.inverse(x)
        assert np.max(np.abs(back.value - z)) < 1e-8
        np.testing.assert_allclose((lad_f + lad_i).value, np.zeros(300), atol=1e-9)

    def test_lad_is_sum_of_parts(self):
        t1, _ = build_layer("rq-spline-coupling", 2, seed=1)
        t2, _ = build_layer("affine-coupling", 2, seed=2)
        z = ad.constant(RNG(48).normal(size=(50, 2)))
        x1, l1 = t1.forward(z)
        _, l2 = t2.forward(x1)
        chain = tr.compose([t1, t2])
        _, total = chain.forward(z)
        np.testing.assert_allclose(total.value, (l1 + l2).value, atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        a, _ = build_layer("elementwise-affine", 2)
        b, _ = build_layer("elementwise-affine", 3)
        with pytest.raises(ContractError):
            tr.compose([a, b])


class TestConditioning:
    def test_context_changes_only_transformed_half(self):
        t, _ = build_layer("rq-spline-coupling", 4, seed=13, context_dim=1)
        z = ad.constant(RNG(49).normal(size=(10, 4)))
        out0, _ = t.forward(z, ad.constant(np.zeros((10, 1))))
        out1, _ = t.forward(z, ad.constant(np.ones((10, 1))))
        np.testing.assert_array_equal(out0.value[:, t.idx_id], out1.value[:, t.idx_id])
        assert np.any(out0.value[:, t.idx_tr] != out1.value[:, t.idx_tr])

    def test_context_required_iff_conditional(self):
        t, _ = build_layer("rq-spline-coupling", 2, context_dim=1)
        with pytest.raises(ContractError):
            t.forward(ad.constant(np.zeros((5, 2))))
        u, _ = build_layer("rq-spline-coupling", 2)
        with pytest.raises(ContractError):
            u.forward(ad.constant(np.zeros((5, 2))), ad.constant(np.zeros((5, 1))))


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    value=st.floats(-3.8, 3.8, allow_nan=False),
)
def test_spline_roundtrip_property(seed, value):
    rng = np.random.default_rng(seed)
    k = 5
    w = rng.uniform(0.2, 1.0, size=k)
    w = w / w.sum() * 8.0
    h = rng.uniform(0.2, 1.0, size=k)
    h = h / h.sum() * 8.0
    d = rng.uniform(0.2, 4.0, size=k + 1)
    knots = tr.SplineParams(widths=w, heights=h, derivatives=d, bound=4.0)
    y, _ = tr.rq_spline_elementwise(value, knots)
    back, _ = tr.rq_spline_elementwise_inverse(y, knots)
    assert back == pytest.approx(value, abs=1e-8)


class TestGradients:
    @pytest.mark.parametrize("kind", ["affine-coupling", "rq-spline-coupling", "lu-linear"])
    def test_forward_gradcheck(self, kind):
        t, store = build_layer(kind, 3, seed=17)
        z = ad.constant(RNG(50).normal(size=(6, 3)))

        def loss():
            x, lad = t.forward(z)
            return ad.mean(x * x) + ad.mean(lad)

        report = ad.gradient_check(loss, store, tolerance=1e-5)
        assert report.passed, f"max rel err {report.max_rel_error} at {report.worst_param}"

    def test_inverse_gradcheck_spline(self):
        t, store = build_layer("rq-spline-coupling", 2, seed=19)
        x = ad.constant(RNG(51).normal(size=(6, 2)))

        def loss():
            z, lad = t.inverse(x)
            return ad.mean(z * z) - ad.mean(lad)

        report = ad.gradient_check(loss, store, tolerance=1e-5)
        assert report.passed, f"max rel err {report.max_rel_error} at {report.worst_param}"
