"""Built-in geometry models.

Each factory returns a fully wired :class:`~pathdiv.geometry.GeometryModel`
with analytic jacobians.  ``BUILTINS`` maps names to factories.
"""

from dataclasses import replace

import numpy as np

from .errors import PathDivError
from .geometry import Embedding, GeometryModel, VectorField


def _basis_field(d, i):
    e = np.zeros(d)
    e[i] = 1.0
    return VectorField.constant(e, name=f"e{i + 1}")


def _identity_embedding(d):
    eye = np.eye(d)

    def projection(x):
        return np.broadcast_to(eye, x.shape + (d,)).copy()

    def dprojection(x, v):
        return np.zeros(x.shape + (d,))

    return Embedding(
        ambient_dim=d,
        projection=projection,
        constraint=lambda x: np.zeros(x.shape[:-1]),
        retract=lambda x: x,
        dprojection=dprojection,
    )


def _identity_op(d):
    eye = np.eye(d)
    return lambda x: np.broadcast_to(eye, x.shape[:-1] + (d, d)).copy()


def flat(dim=1, origin=None):
    """Euclidean space with X_i = e_i, V = 0, family = frame."""
    frame = tuple(_basis_field(dim, i) for i in range(dim))
    return GeometryModel(
        name="flat",
        dim=dim,
        frame=frame,
        family=frame,
        origin=np.zeros(dim) if origin is None else origin,
        embedding=_identity_embedding(dim),
        mode="gradient_system",
        adjoint=_identity_op(dim),
        family_pinv=_identity_op(dim),
        params={"dim": dim},
    )


def drifted_flat(dim=2, c=0.5, origin=None):
    """Flat space with the span-compatible drift V = c X_1."""
    base = flat(dim, origin)
    e1 = np.zeros(dim)
    e1[0] = c
    return replace(base, name="drifted_flat", drift=VectorField.constant(e1, name="V"),
                   params={"dim": dim, "c": c})


def _heis_x1(x):
    out = np.zeros_like(x)
    out[..., 0] = 1.0
    out[..., 2] = -0.5 * x[..., 1]
    return out


def _heis_x1_jac(x):
    j = np.zeros(x.shape + (3,))
    j[..., 2, 1] = -0.5
    return j


def _heis_x2(x):
    out = np.zeros_like(x)
    out[..., 1] = 1.0
    out[..., 2] = 0.5 * x[..., 0]
    return out


def _heis_x2_jac(x):
    j = np.zeros(x.shape + (3,))
    j[..., 2, 0] = 0.5
    return j


def heisenberg(origin=None):
    """Heisenberg group on R^3 with X_2 carrying the sign that makes [X_1, X_2] = d/dz."""
    x1 = VectorField(_heis_x1, _heis_x1_jac, name="X1")
    x2 = VectorField(_heis_x2, _heis_x2_jac, name="X2")
    v3 = _basis_field(3, 2)
    v3.name = "V3"
    return GeometryModel(
        name="heisenberg",
        dim=3,
        frame=(x1, x2),
        family=(x1, x2, v3),
        origin=np.zeros(3) if origin is None else origin,
        mode="linearly_independent",
        adjoint=_heis_adjoint,
        family_pinv=_heis_family_inverse,
    )


def _heis_v(x):
    return np.stack([-0.5 * x[..., 1], 0.5 * x[..., 0]], axis=-1)


def _heis_adjoint(x):
    # X = [I; v^T]; (X^T X)^{-1} X^T = [I - v v^T/(1+|v|^2) | v/(1+|v|^2)]
    v = _heis_v(x)
    s = 1.0 + np.sum(v * v, axis=-1)[..., None, None]
    out = np.empty(x.shape[:-1] + (2, 3))
    out[..., :, :2] = np.eye(2) - v[..., :, None] * v[..., None, :] / s
    out[..., :, 2] = v / s[..., 0]
    return out


def _heis_family_inverse(x):
    out = np.zeros(x.shape[:-1] + (3, 3))
    out[..., 0, 0] = out[..., 1, 1] = out[..., 2, 2] = 1.0
    out[..., 2, :2] = -_heis_v(x)
    return out


def _sphere_projection(x):
    out = -x[..., :, None] * (x / np.sum(x * x, axis=-1, keepdims=True))[..., None, :]
    idx = np.arange(x.shape[-1])
    out[..., idx, idx] += 1.0
    return out


def _sphere_dprojection(x, v):
    # -(x v^T + v x^T)/s + 2 (x.v) x x^T / s^2 = (x (c x - v)^T - v x^T) / s
    s = np.sum(x * x, axis=-1, keepdims=True)
    c = 2.0 * np.sum(x * v, axis=-1, keepdims=True) / s
    xs = x / s
    return xs[..., :, None] * (c * x - v)[..., None, :] - v[..., :, None] * xs[..., None, :]


def _sphere_frame_field(i, n):
    def f(x):
        s = np.sum(x * x, axis=-1)
        out = -x * (x[..., i] / s)[..., None]
        out[..., i] += 1.0
        return out

    def jac(x):
        s = np.sum(x * x, axis=-1)[..., None, None]
        eye = np.eye(n)
        xi = x[..., i][..., None, None]
        # d_j(-x_k x_i / s) = -(delta_kj x_i + x_k delta_ij)/s + 2 x_k x_i x_j / s^2
        return (-(eye * xi + x[..., :, None] * eye[i][None, :]) / s
                + 2.0 * x[..., :, None] * x[..., None, :] * xi / s**2)

    return VectorField(f, jac, name=f"X{i + 1}")


def _sphere_sampler(rng, count):
    y = rng.standard_normal((count, 3))
    return y / np.linalg.norm(y, axis=-1, keepdims=True)


def sphere_gradient(origin=None):
    """Brownian motion on the unit sphere in R^3: X_i = P e_i, family = frame."""
    frame = tuple(_sphere_frame_field(i, 3) for i in range(3))
    emb = Embedding(
        ambient_dim=3,
        projection=_sphere_projection,
        constraint=lambda x: np.sum(x * x, axis=-1) - 1.0,
        retract=lambda x: x / np.linalg.norm(x, axis=-1, keepdims=True),
        dprojection=_sphere_dprojection,
    )
    o = np.array([0.0, 0.0, 1.0]) if origin is None else np.asarray(origin, float)
    return GeometryModel(
        name="sphere_gradient",
        dim=2,
        frame=frame,
        family=frame,
        origin=o,
        embedding=emb,
        mode="gradient_system",
        # P is an orthogonal projector, so it is its own pseudo-inverse
        adjoint=_sphere_projection,
        family_pinv=_sphere_projection,
        frame_fn=_sphere_projection,
        # X = X^* = P, hence nabla_v X = P dP(v)
        nabla_fn=lambda x, v: _sphere_projection(x) @ _sphere_dprojection(x, v),
        # on the unit sphere alpha = -eta; tests check it against the FD oracle
        alpha_fn=lambda x, eta: -eta,
        sampler=_sphere_sampler,
    )


def _degen_x2(x):
    out = np.ones_like(x)
    out[..., 1] = x[..., 0]
    return out


def _degen_x2_jac(x):
    j = np.zeros(x.shape + (2,))
    j[..., 1, 0] = 1.0
    return j


def degenerate_demo(origin=None):
    """X_1 = d/dx and X_2 = d/dx + x d/dy, which coincide on the line x = 0."""
    x1 = _basis_field(2, 0)
    x2 = VectorField(_degen_x2, _degen_x2_jac, name="X2")
    x1.name = "X1"
    return GeometryModel(
        name="degenerate_demo",
        dim=2,
        frame=(x1, x2),
        family=(x1, x2),
        origin=np.zeros(2) if origin is None else origin,
        mode="linearly_independent",
    )


BUILTINS = {
    "flat": flat,
    "heisenberg": heisenberg,
    "sphere_gradient": sphere_gradient,
    "drifted_flat": drifted_flat,
    "degenerate_demo": degenerate_demo,
}

DESCRIPTIONS = {
    "flat": "Euclidean R^d, X_i = e_i; Wiener measure itself",
    "heisenberg": "Heisenberg group, two generators plus their bracket as family",
    "sphere_gradient": "Brownian motion on S^2 as a gradient system X_i = P e_i",
    "drifted_flat": "flat R^d with drift V = c X_1 (Girsanov reduction)",
    "degenerate_demo": "two fields in R^2 coinciding on x = 0 (spanning failure)",
}


def builtin(name, **kwargs):
    """Return the built-in model ``name``; extra keywords go to its factory."""
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise PathDivError(f"unknown model {name!r}; known: {', '.join(sorted(BUILTINS))}") from None
    return factory(**kwargs)
