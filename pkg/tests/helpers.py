"""Shared fixtures for model-level tests: hand-built analytic transforms and
parameter randomization into trained-like regimes."""

import numpy as np

from maniflow import autodiff as ad
from maniflow import transforms as tr


def randomize(store, rng, scale=0.1):
    """Perturb conditioner output layers and free parameters only, keeping
    He-initialized trunks; large trunk noise produces pathological splines
    no training run would visit."""
    for p in store:
        if ".in." in p.name or ".block" in p.name:
            continue
        p.value = p.value + rng.normal(size=p.shape) * scale


def identity_chain(store, prefix, dim):
    return tr.Chain([tr.ElementwiseAffine(store, prefix, dim)])


def scale_chain(store, prefix, dim, scales):
    chain = identity_chain(store, prefix, dim)
    store[f"{prefix}.log_scale"].value = np.log(np.asarray(scales, dtype=float))
    return chain


class PolarTransform(tr.Transform):
    """(r, phi) -> (r cos phi, r sin phi); the level set phi = 0 is the
    positive first axis and the Jacobian determinant is r."""

    def __init__(self):
        super().__init__(2, 0)

    def forward(self, z, context=None):
        r = ad.take_cols(z, [0])
        phi = ad.take_cols(z, [1])
        x = ad.concat([r * ad.cos(phi), r * ad.sin(phi)], axis=-1)
        lad = ad.reshape(ad.log(r), (z.shape[0],))
        return x, lad

    def inverse(self, x, context=None):
        x0 = ad.take_cols(x, [0])
        x1 = ad.take_cols(x, [1])
        r = ad.sqrt(x0 * x0 + x1 * x1)
        phi = ad.atan2(x1, x0)
        lad = ad.reshape(-ad.log(r), (x.shape[0],))
        return ad.concat([r, phi], axis=-1), lad


class CircleLevelSet(tr.Transform):
    """(u, v) -> ((1+v) cos u, (1+v) sin u); the level set v = 0 is the unit
    circle, so this transform hard-wires the circle chart into a flow."""

    def __init__(self):
        super().__init__(2, 0)

    def forward(self, z, context=None):
        u = ad.take_cols(z, [0])
        v = ad.take_cols(z, [1])
        radius = 1.0 + v
        x = ad.concat([radius * ad.cos(u), radius * ad.sin(u)], axis=-1)
        lad = ad.reshape(ad.log(radius), (z.shape[0],))
        return x, lad

    def inverse(self, x, context=None):
        x0 = ad.take_cols(x, [0])
        x1 = ad.take_cols(x, [1])
        r = ad.sqrt(x0 * x0 + x1 * x1)
        u = ad.atan2(x1, x0)
        lad = ad.reshape(-ad.log(r), (x.shape[0],))
        return ad.concat([u, r - 1.0], axis=-1), lad


class ConditionalShift(tr.Transform):
    """u = u_tilde + theta: a flow whose base mean is the context."""

    def __init__(self, dim, context_dim=1):
        super().__init__(dim, context_dim)

    def forward(self, z, context=None):
        self._check(z, context)
        zeros = ad.constant(np.zeros(z.shape[0]))
        return z + context, zeros

    def inverse(self, x, context=None):
        self._check(x, context)
        zeros = ad.constant(np.zeros(x.shape[0]))
        return x - context, zeros
