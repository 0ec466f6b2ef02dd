"""Vector fields, metrics and the two connections used by the path-space
constructions.

Every routine is vectorised over leading batch axes.  A point array has shape
``(..., D)`` where ``D`` is the coordinate dimension: the chart dimension for
chart models, the ambient dimension ``N`` for embedded ones.  Frame matrices
``X(x)`` have shape ``(..., D, n)``, family matrices ``A(x) = [a_I^j]`` have
shape ``(..., D, K)``.

Two inner products appear side by side:

* ``metric_inner``: the Riemannian metric whose co-metric is
  ``g^{jk} = a_I^j a_I^k`` (the spanning family is a tight frame for it);
* ``e_inner``: the inner product on ``E = span{X_i}`` induced by the linear
  map ``h -> h_i X_i``; the adjoint ``X(x)^*`` is the Moore-Penrose inverse.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, ModeError, NotInBundleError, SpanningError

H_FD = 1e-5
H_FD2 = 1e-4
BUNDLE_TOL = 1e-8

MODES = ("general", "linearly_independent", "gradient_system")


def matvec(m, v):
    return np.einsum("...ij,...j->...i", m, v)


def _t(m):
    return np.swapaxes(m, -1, -2)


def fd_directional(f, x, v, h=H_FD):
    """Central difference of ``f`` at ``x`` along ``v``."""
    return (f(x + h * v) - f(x - h * v)) / (2.0 * h)


def fd_jacobian(f, x, h=H_FD):
    """Central-difference jacobian, ``J[..., k, j] = d f^k / d x^j``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[j] = h
        cols.append((f(x + e) - f(x - e)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def pinv(m, rank=None):
    """Batched Moore-Penrose inverse.

    Uses the normal equations when ``rank`` says the matrix has full column or
    full row rank (much faster than a batched SVD); falls back to ``np.linalg.pinv``.
    """
    r, c = m.shape[-2:]
    try:
        if rank == c:
            mt = _t(m)
            return np.linalg.solve(mt @ m, mt)
        if rank == r:
            mt = _t(m)
            return _t(np.linalg.solve(m @ mt, m))
    except np.linalg.LinAlgError:
        pass
    return np.linalg.pinv(m)


class VectorField:
    """A smooth vector field in coordinates.

    ``func`` maps points ``(..., D)`` to components ``(..., D)``.  The jacobian
    ``J[..., k, j] = d V^k / d x^j`` is taken from ``jacobian`` when supplied,
    otherwise by central differences with step ``h_fd``.
    """

    def __init__(self, func, jacobian=None, name=None, h_fd=H_FD):
        self.is_constant = False
        if isinstance(func, VectorField):
            self.is_constant = func.is_constant
            jacobian = jacobian or func._jacobian
            name = name or func.name
            func = func._func
        self._func = func
        self._jacobian = jacobian
        self.name = name or getattr(func, "__name__", "field")
        self.h_fd = h_fd

    def __repr__(self):
        return f"VectorField({self.name!r})"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(self._func(x), dtype=float)

    @property
    def has_analytic_jacobian(self):
        return self._jacobian is not None

    def jacobian(self, x):
        if self._jacobian is None:
            return self.fd_jacobian(x)
        return np.asarray(self._jacobian(np.asarray(x, dtype=float)), dtype=float)

    def fd_jacobian(self, x, h=None):
        return fd_jacobian(self, x, self.h_fd if h is None else h)

    def directional(self, x, v):
        """Derivative of the components along ``v``."""
        return matvec(self.jacobian(x), v)

    @classmethod
    def constant(cls, vec, name=None):
        vec = np.asarray(vec, dtype=float)

        def f(x):
            return np.zeros(x.shape[:-1] + vec.shape) + vec

        def jac(x):
            return np.zeros(x.shape[:-1] + vec.shape + vec.shape)

        out = cls(f, jac, name=name or f"const{tuple(vec)}")
        out.is_constant = True
        return out


def as_field(f):
    return f if isinstance(f, VectorField) else VectorField(f)


@dataclass(frozen=True)
class Embedding:
    """Isometric embedding data for a submanifold of ``R^N``.

    ``projection(x)`` returns the orthogonal projector onto ``T_x M`` extended
    smoothly to a neighbourhood; ``retract`` maps a nearby point back onto M.
    """

    ambient_dim: int
    projection: Callable
    constraint: Callable
    retract: Callable
    dprojection: Optional[Callable] = None

    def dP(self, x, v, h=H_FD):
        if self.dprojection is not None:
            return self.dprojection(x, v)
        return fd_directional(self.projection, x, v, h)


@dataclass(frozen=True, eq=False)
class GeometryModel:
    """Diffusion frame ``X_1..X_n``, drift ``V`` and spanning family ``V_I``.

    ``adjoint`` and ``family_pinv`` optionally give ``X(x)^*`` and ``A(x)^+``
    in closed form, ``frame_fn(x)`` the stacked frame matrix, ``nabla_fn(x, v)`` the matrix of ``nabla_v X_j`` and
    ``alpha_fn(x, eta)`` the basis-free divergence coefficients; by default
    they are computed numerically.
    """

    name: str
    dim: int
    frame: tuple
    family: tuple
    origin: np.ndarray
    drift: Optional[VectorField] = None
    embedding: Optional[Embedding] = None
    mode: str = "general"
    adjoint: Optional[Callable] = None
    family_pinv: Optional[Callable] = None
    frame_fn: Optional[Callable] = None
    nabla_fn: Optional[Callable] = None
    alpha_fn: Optional[Callable] = None
    sampler: Optional[Callable] = None
    spanning_floor: float = 1e-6
    h_fd: float = H_FD
    h_fd2: float = H_FD2
    constraint_limit: float = 1e-8
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModeError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "frame", tuple(as_field(f) for f in self.frame))
        object.__setattr__(self, "family", tuple(as_field(f) for f in self.family))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        if self.drift is not None:
            object.__setattr__(self, "drift", as_field(self.drift))
        if self.origin.shape != (self.coord_dim,):
            raise DimensionError(
                f"origin has shape {self.origin.shape}, expected ({self.coord_dim},)"
            )

    # --- sizes -------------------------------------------------------------
    @property
    def coord_dim(self):
        return self.embedding.ambient_dim if self.embedding else self.dim

    @property
    def noise_dim(self):
        return len(self.frame)

    @property
    def family_size(self):
        return len(self.family)

    @functools.cached_property
    def rank_E(self):
        """Rank of ``E_x``, assumed constant and read off at the base point."""
        return int(np.linalg.matrix_rank(self.frame_matrix(self.origin), tol=1e-9))

    @property
    def linearly_independent(self):
        return self.rank_E == self.noise_dim

    @property
    def elliptic(self):
        return self.rank_E == self.dim

    def without_drift(self):
        return replace(self, drift=None)

    # --- evaluations -------------------------------------------------------
    def frame_matrix(self, x):
        if self.frame_fn is not None:
            return np.asarray(self.frame_fn(np.asarray(x, dtype=float)), dtype=float)
        return np.stack([f(x) for f in self.frame], axis=-1)

    def family_matrix(self, x):
        if self.family_is_frame:
            return self.frame_matrix(x)
        return np.stack([f(x) for f in self.family], axis=-1)

    @property
    def constant_frame(self):
        """Every diffusion and family field is constant, so all connection tensors vanish."""
        return all(f.is_constant for f in self.frame + self.family)

    @property
    def family_is_frame(self):
        return len(self.family) == len(self.frame) and all(a is b for a, b in zip(self.family, self.frame))

    def frame_jacobians(self, x):
        """``(..., n, D, D)`` stack of frame jacobians."""
        return np.stack([f.jacobian(x) for f in self.frame], axis=-3)

    def family_jacobians(self, x):
        return np.stack([f.jacobian(x) for f in self.family], axis=-3)

    def drift_vector(self, x):
        x = np.asarray(x, dtype=float)
        if self.drift is None:
            return np.zeros_like(x)
        return self.drift(x)

    def adjoint_matrix(self, x):
        """``X(x)^*``, shape ``(..., n, D)``."""
        if self.adjoint is not None:
            return np.asarray(self.adjoint(np.asarray(x, dtype=float)), dtype=float)
        return pinv(self.frame_matrix(x), self.rank_E)

    def family_pinv_matrix(self, x):
        """``A(x)^+``, shape ``(..., K, D)``; rows give ``(u, V_I)``."""
        if self.family_pinv is not None:
            return np.asarray(self.family_pinv(np.asarray(x, dtype=float)), dtype=float)
        return pinv(self.family_matrix(x), None if self.embedding else self.dim)

    def family_coeffs(self, x, u):
        """``(u, V_I)`` for every I: the coefficients with ``u = (u, V_I) V_I``."""
        return matvec(self.family_pinv_matrix(x), u)

    def metric_inner(self, x, u, v):
        ap = self.family_pinv_matrix(x)
        return np.sum(matvec(ap, u) * matvec(ap, v), axis=-1)

    def e_inner(self, x, u, v):
        xs = self.adjoint_matrix(x)
        return np.sum(matvec(xs, u) * matvec(xs, v), axis=-1)

    def tangent_projector(self, x):
        x = np.asarray(x, dtype=float)
        if self.embedding is None:
            return np.broadcast_to(np.eye(self.coord_dim), x.shape + (self.coord_dim,)).copy()
        return self.embedding.projection(x)

    def project_tangent(self, x, v):
        if self.embedding is None:
            return np.asarray(v, dtype=float)
        return matvec(self.embedding.projection(x), v)

    def sample_points(self, rng, count):
        if self.sampler is not None:
            return self.sampler(rng, count)
        return self.origin + rng.standard_normal((count, self.coord_dim))

    def bundle_residual(self, x, v):
        """Distance of ``v`` from ``E_x`` relative to ``max(1, |v|)``."""
        xm = self.frame_matrix(x)
        proj = matvec(xm, matvec(self.adjoint_matrix(x), v))
        scale = np.maximum(1.0, np.linalg.norm(v, axis=-1))
        return np.linalg.norm(v - proj, axis=-1) / scale


@dataclass
class Point:
    """A point in chart or ambient coordinates."""

    coords: np.ndarray
    chart_id: str = "global"

    def constraint_residual(self, model):
        if model.embedding is None:
            return 0.0
        return float(np.abs(model.embedding.constraint(np.asarray(self.coords, float))))


@dataclass
class TangentVector:
    base: Point
    components: np.ndarray

    def tangency_residual(self, model):
        c = np.asarray(self.components, dtype=float)
        return float(np.linalg.norm(model.project_tangent(self.base.coords, c) - c))


# --- brackets and metric ---------------------------------------------------

def lie_bracket(a, b, x):
    """``[A, B]^k = A^j d_j B^k - B^j d_j A^k`` at ``x``."""
    a, b = as_field(a), as_field(b)
    va, vb = a(x), b(x)
    if va.shape != vb.shape:
        raise DimensionError(f"field shapes differ: {va.shape} vs {vb.shape}")
    return matvec(b.jacobian(x), va) - matvec(a.jacobian(x), vb)


def spanning_margin(model, x):
    """Smallest of the leading ``dim`` singular values of ``[a_I^j]``."""
    sv = np.linalg.svd(model.family_matrix(x), compute_uv=False)
    return sv[..., model.dim - 1]


def check_spanning(model, x):
    margin = spanning_margin(model, x)
    if np.any(~(margin > model.spanning_floor)):
        raise SpanningError(
            f"{model.name}: family fails to span T_xM "
            f"(smallest singular value {np.min(margin):.3e} <= floor {model.spanning_floor:g})"
        )
    return margin


def metric_matrix(model, x, check=True):
    """Co-metric ``g^{jk} = sum_I a_I^j a_I^k``."""
    if check:
        check_spanning(model, x)
    a = model.family_matrix(x)
    return a @ _t(a)


def lower_metric(model, x):
    """Covariant metric ``g_{jk}`` (chart models only)."""
    if model.embedding is not None:
        raise ModeError("lower_metric needs chart coordinates; embedded models use the ambient metric")
    return np.linalg.inv(metric_matrix(model, x, check=False))


def reproduce(model, x, v):
    """``sum_I (v, V_I) V_I``; equals ``v`` for every tangent ``v``."""
    return matvec(model.family_matrix(x), model.family_coeffs(x, v))


# --- Le Jan-Watanabe connection ------------------------------------------

def _require_bundle(model, x, v, what):
    res = model.bundle_residual(x, v)
    if np.any(res > BUNDLE_TOL):
        raise NotInBundleError(f"{what} is not a section of E (residual {np.max(res):.2e})")


def section_extension(model, x0, v0):
    """Extend ``v0 in E_{x0}`` to the section ``y -> X(y) X(x0)^* v0``.

    The extension is parallel for the Le Jan-Watanabe connection at ``x0``.
    """
    c = matvec(model.adjoint_matrix(x0), v0)

    def ext(y):
        return matvec(model.frame_matrix(y), c)

    return ext


def ljw_derivative(model, x, v, z, h=None, check=True):
    """Le Jan-Watanabe derivative ``X(x) d_v(X^* Z)`` of a section ``Z``."""
    h = model.h_fd if h is None else h
    z = as_field(z)
    if check:
        _require_bundle(model, x, z(x), "Z")

    def coords(y):
        return matvec(model.adjoint_matrix(y), z(y))

    return matvec(model.frame_matrix(x), fd_directional(coords, x, v, h))


def ljw_frame_derivative(model, x, v, h=None):
    """All ``nabla_v X_j`` at once, as the columns of a ``(..., D, n)`` array."""
    if model.nabla_fn is not None and h is None:
        return np.asarray(model.nabla_fn(np.asarray(x, float), np.asarray(v, float)), dtype=float)
    h = model.h_fd if h is None else h

    def k(y):
        return model.adjoint_matrix(y) @ model.frame_matrix(y)

    return model.frame_matrix(x) @ fd_directional(k, x, v, h)


def _ljw_of_matrix(model, x, v, fmat, h):
    """Apply the connection column-wise to a matrix-valued section ``fmat``."""

    def k(y):
        return model.adjoint_matrix(y) @ fmat(y)

    return model.frame_matrix(x) @ fd_directional(k, x, v, h)


# --- Levi-Civita connection -------------------------------------------------

def christoffel(model, x, h=None):
    """Christoffel symbols ``Gamma[..., k, a, b]`` of the metric from ``{V_I}``."""
    h = model.h_fd if h is None else h
    ginv = metric_matrix(model, x)
    dg = fd_jacobian(lambda y: lower_metric(model, y).reshape(y.shape[:-1] + (-1,)), x, h)
    d = model.coord_dim
    dg = dg.reshape(dg.shape[:-2] + (d, d, d))  # [..., a, b, l] = d_l g_ab
    # t[l, a, b] = d_a g_lb + d_b g_la - d_l g_ab
    t = np.einsum("...lba->...lab", dg) + dg - np.einsum("...abl->...lab", dg)
    return 0.5 * np.einsum("...kl,...lab->...kab", ginv, t)


def levi_civita_derivative(model, x, v, b):
    """``nabla~_v B`` for the Riemannian metric (projection formula when embedded)."""
    b = as_field(b)
    db = b.directional(x, v)
    if model.embedding is not None:
        return matvec(model.embedding.projection(x), db)
    gam = christoffel(model, x)
    return db + np.einsum("...kab,...a,...b->...k", gam, v, b(x))


def connection_increment(model, x, dx, frame):
    """Transport increment ``dF`` of a tangent frame ``F`` along ``dx``.

    Chart models: ``-Gamma(dx, F)``; embedded models: ``dP(dx) F``.
    """
    if model.embedding is not None:
        return model.embedding.dP(x, dx, model.h_fd) @ frame
    gam = christoffel(model, x)
    return -np.einsum("...kab,...a,...bc->...kc", gam, dx, frame)


# --- tensors built on the two connections --------------------------------

def tensor_S(model, index, x, vec, extension=None):
    """``S_I(X) = nabla_{V_I} X + [X, V_I]`` for ``X in E`` (tensorial)."""
    if extension is None:
        _require_bundle(model, x, vec, "X")
        extension = section_extension(model, x, vec)
    ext = VectorField(extension, h_fd=model.h_fd)
    vi = model.family[index]
    return ljw_derivative(model, x, vi(x), ext, check=False) + lie_bracket(ext, vi, x)


def tensor_T(model, index, x, vec, extension=None):
    """``T_I(X) = S_I(X) - <nabla_{V_I} X_i, X> X_i``."""
    s = tensor_S(model, index, x, vec, extension)
    vi = model.family[index](x)
    n_cols = ljw_frame_derivative(model, x, vi)
    xs = model.adjoint_matrix(x)
    # <nabla X_i, X> for each i
    coef = np.einsum("...ai,...a->...i", xs @ n_cols, matvec(xs, vec))
    return s - matvec(model.frame_matrix(x), coef)


def tensor_T_intrinsic(model, x, vec_e, vec):
    """Basis-free ``T(X, Y) = nabla~_Y X - nabla_Y X`` with ``X in E``."""
    _require_bundle(model, x, vec_e, "X")
    ext = VectorField(section_extension(model, x, vec_e), h_fd=model.h_fd)
    return levi_civita_derivative(model, x, vec, ext) - ljw_derivative(model, x, vec, ext, check=False)


def _pair_matrix(model, x, cols):
    """``Q[..., i, j] = <cols_i, X_j>`` for a ``(..., D, n)`` column stack."""
    xs = model.adjoint_matrix(x)
    k = xs @ model.frame_matrix(x)
    return _t(xs @ cols) @ k


def coeff_G_along(model, x, v):
    """``G_v^{ij} = <nabla_v X_i, X_j> - <nabla_v X_j, X_i>``."""
    q = _pair_matrix(model, x, ljw_frame_derivative(model, x, v))
    return q - _t(q)


def coeff_G(model, index, x):
    """``G_I^{ij}``; antisymmetric bitwise since it is formed as ``Q - Q^T``."""
    return coeff_G_along(model, x, model.family[index](x))


def _e_pair(xs, a, b):
    """``<a_i, b_j>`` for column stacks ``a``, ``b`` given ``X^*``."""
    return _t(xs @ a) @ (xs @ b)


def coeff_alpha(model, index, x, h=None):
    """``alpha_I^{kij}`` as an array ``[..., k, i, j]`` (nested differences)."""
    h = model.h_fd2 if h is None else h
    vi = model.family[index]
    xm = model.frame_matrix(x)
    xs = model.adjoint_matrix(x)

    def nab_vi(y):
        return ljw_frame_derivative(model, y, vi(y), h)

    n_i = nab_vi(x)
    out = []
    for k in range(model.noise_dim):
        xk = xm[..., :, k]
        d_k = _ljw_of_matrix(model, x, xk, nab_vi, h)
        m_k = ljw_frame_derivative(model, x, xk, h)
        p = _e_pair(xs, d_k, xm) + _e_pair(xs, n_i, m_k)
        out.append(p - _t(p))
    return np.stack(out, axis=-3)


def coeff_alpha_fd(model, index, x, h=None):
    """Oracle: ``alpha_I^{kij}`` as the ``X_k`` derivative of ``G_I^{ij}``."""
    h = model.h_fd2 if h is None else h
    xm = model.frame_matrix(x)
    return np.stack(
        [fd_directional(lambda y: coeff_G(model, index, y), x, xm[..., :, k], h)
         for k in range(model.noise_dim)],
        axis=-3,
    )


def intrinsic_alpha(model, x, eta, h=None, closed_form=True):
    """The coefficients ``alpha_i`` of the basis-free divergence.

    ``eta`` is extended as a section that is parallel at ``x``; requires
    ``eta in E``.  A model-supplied ``alpha_fn`` is used when present unless
    ``closed_form`` is false.
    """
    if closed_form and model.alpha_fn is not None:
        return np.asarray(model.alpha_fn(np.asarray(x, float), np.asarray(eta, float)), dtype=float)
    h = model.h_fd2 if h is None else h
    xm = model.frame_matrix(x)
    xs = model.adjoint_matrix(x)
    ext = section_extension(model, x, eta)

    def nab_eta(y):
        return ljw_frame_derivative(model, y, ext(y), h)

    n_eta = nab_eta(x)
    n = model.noise_dim
    alpha = np.zeros(x.shape[:-1] + (n,))
    for k in range(n):
        xk = xm[..., :, k]
        d_k = _ljw_of_matrix(model, x, xk, nab_eta, h)
        m_k = ljw_frame_derivative(model, x, xk, h)
        a1 = _e_pair(xs, d_k[..., :, k:k + 1], xm)[..., 0, :]
        a2 = _e_pair(xs, n_eta[..., :, k:k + 1], m_k)[..., 0, :]
        a3 = _e_pair(xs, d_k, xm[..., :, k:k + 1])[..., :, 0]
        a4 = _e_pair(xs, n_eta, m_k[..., :, k:k + 1])[..., :, 0]
        alpha += a1 + a2 - a3 - a4
    return alpha


def intrinsic_alpha_fd(model, x, eta, h=None):
    """Oracle: ``alpha_i = sum_k X_k(G_eta^{ki})`` with ``eta`` carried parallel."""
    h = model.h_fd2 if h is None else h
    xm = model.frame_matrix(x)
    ext = section_extension(model, x, eta)
    alpha = 0.0
    for k in range(model.noise_dim):
        def g_row(y, k=k):
            return coeff_G_along(model, y, ext(y))[..., k, :]

        alpha = alpha + fd_directional(g_row, x, xm[..., :, k], h)
    return alpha


def _tangent_extension(model, x0, y0):
    if model.embedding is None:
        return VectorField.constant(y0)
    c = np.asarray(y0, dtype=float)
    return VectorField(lambda y: matvec(model.embedding.projection(y), np.zeros_like(y) + c), h_fd=model.h_fd)


def curvature(model, x, a, b, z, h=None):
    """``R(A,B)Z = nabla_A nabla_B Z - nabla_B nabla_A Z - nabla_[A,B] Z``.

    ``a``, ``b`` are vector fields, ``z`` a section of E.
    """
    h = model.h_fd2 if h is None else h
    a, b, z = as_field(a), as_field(b), as_field(z)

    def nb_z(y):
        return ljw_derivative(model, y, b(y), z, h, check=False)

    def na_z(y):
        return ljw_derivative(model, y, a(y), z, h, check=False)

    ab = VectorField(lambda y: lie_bracket(a, b, y))
    return (
        ljw_derivative(model, x, a(x), nb_z, h, check=False)
        - ljw_derivative(model, x, b(x), na_z, h, check=False)
        - ljw_derivative(model, x, ab(x), z, h, check=False)
    )


def ricci(model, x, y, h=None):
    """``Ric(Y) = R(Y, X_i) X_i`` summed over the frame."""
    h = model.h_fd2 if h is None else h
    yf = _tangent_extension(model, x, y)
    yf = VectorField(yf, h_fd=h)
    total = 0.0
    for xi in model.frame:
        xi = VectorField(xi, h_fd=h) if not xi.has_analytic_jacobian else xi
        total = total + curvature(model, x, yf, xi, xi, h)
    return total


def ricci_contraction(model, x, eta):
    """``<Ric(eta), X_i>`` for every i."""
    ric = ricci(model, x, eta)
    xs = model.adjoint_matrix(x)
    return np.einsum("...a,...ai->...i", matvec(xs, ric), xs @ model.frame_matrix(x))


def check_left_inverse(model, x, tol=1e-10):
    """Raise unless ``X(x)^* X(x) = I`` at every point (pointwise independence)."""
    xm = model.frame_matrix(x)
    res = np.max(np.abs(model.adjoint_matrix(x) @ xm - np.eye(model.noise_dim)))
    if not res <= tol:
        raise ModeError(
            f"{model.name}: X^*X differs from the identity by {res:.2e}; "
            "the frame is not pointwise linearly independent"
        )
    return float(res)


def is_gradient_frame(model, x, tol=1e-10):
    """True when ``X_i = P e_i`` at every given point."""
    if model.embedding is None:
        p = np.broadcast_to(np.eye(model.coord_dim), np.shape(x)[:-1] + (model.coord_dim,) * 2)
    else:
        p = model.embedding.projection(x)
    if model.noise_dim != model.coord_dim:
        return False
    return bool(np.max(np.abs(model.frame_matrix(x) - p)) <= tol)


def projection_checks(model, x, v, w, h=None):
    """Residual norms behind the vanishing contraction ``<nabla_V X_j, W> X_j``.

    Returns the norms of ``P^2 - P``, ``dP(v) P - Q dP(v)``, ``P dP(v) P w`` and
    of the contraction itself computed through the connection.
    """
    if model.mode != "gradient_system":
        raise ModeError(f"{model.name}: projection checks need gradient_system mode")
    h = model.h_fd if h is None else h
    x, v, w = (np.asarray(a, dtype=float) for a in (x, v, w))
    p = model.tangent_projector(x)
    d = model.coord_dim
    if model.embedding is None:
        dp = np.zeros(p.shape)
    else:
        dp = fd_directional(model.embedding.projection, x, v, h)
    q = np.eye(d) - p
    n_cols = ljw_frame_derivative(model, x, v, h)
    xs = model.adjoint_matrix(x)
    xt = model.frame_matrix(x)
    # <nabla_v X_j, W X-component>: W enters through its E-part P w
    contraction = matvec(xt, np.einsum("...aj,...a->...j", xs @ n_cols, matvec(xs, matvec(p, w))))
    norm = lambda a: np.linalg.norm(a.reshape(a.shape[: x.ndim - 1] + (-1,)), axis=-1)
    return {
        "idempotence": norm(p @ p - p),
        "dP_P_minus_QdP": norm(dp @ p - q @ dp),
        "PdPPw": norm(matvec(p @ dp @ p, w)),
        "contraction": norm(contraction),
    }


# --- per-node tensor bundle used by the path-space solvers ------------------

@dataclass
class NodeTensors:
    """Everything the coefficient systems need at a batch of points.

    Shapes (batch axes omitted): ``X (D,n)``, ``Xs (n,D)``, ``Ap (K,D)``,
    ``A (D,K)``, ``nabla[J] (D,n)`` with columns ``nabla_{V_J} X_i``,
    ``bracket[k, J] = [X_k, V_J] (D)``, ``G[J, i, j]``, ``TX[J, k] = T_J(X_k)``,
    ``alpha[J, k, i, j]`` (optional).
    """

    X: np.ndarray
    Xs: np.ndarray
    A: np.ndarray
    Ap: np.ndarray
    nabla: np.ndarray
    bracket: np.ndarray
    G: np.ndarray
    TX: np.ndarray
    alpha: Optional[np.ndarray] = None


def node_tensors(model, x, with_alpha=False):
    xm = model.frame_matrix(x)
    xs = model.adjoint_matrix(x)
    a = model.family_matrix(x)
    ap = model.family_pinv_matrix(x)
    jx = model.frame_jacobians(x)   # (..., n, D, D)
    jv = model.family_jacobians(x)  # (..., K, D, D)
    lead, (D, n), K = xm.shape[:-2], xm.shape[-2:], model.family_size
    # [X_k, V_J] = J_V X_k - J_{X_k} V_J, stored as brk[J, k, :]
    brk = _t(jv @ xm[..., None, :, :]) - np.moveaxis(jx @ a[..., None, :, :], -1, -3)
    if model.mode == "linearly_independent" or model.constant_frame:
        # X^*X = I or a constant frame: every nabla X_i vanishes, T_J(X_k) is the bracket
        zero = np.zeros(1)
        return NodeTensors(
            X=xm, Xs=xs, A=a, Ap=ap,
            nabla=np.broadcast_to(zero, lead + (K, D, n)),
            bracket=np.swapaxes(brk, -2, -3),
            G=np.broadcast_to(zero, lead + (K, n, n)),
            TX=brk,
            alpha=np.broadcast_to(zero, lead + (K, n, n, n)) if with_alpha else None,
        )
    kmat = xs @ xm
    nab, gs, tx, al = [], [], [], []
    for j in range(K):
        nj = ljw_frame_derivative(model, x, a[..., :, j])
        q = _t(xs @ nj) @ kmat  # q[i, k] = <nabla X_i, X_k>
        gs.append(q - _t(q))
        # T_J(X_k) = nabla_{V_J} X_k + [X_k, V_J] - <nabla_{V_J} X_i, X_k> X_i
        tx.append(_t(nj) + brk[..., j, :, :] - _t(xm @ q))
        nab.append(nj)
        if with_alpha:
            al.append(coeff_alpha(model, j, x))
    return NodeTensors(
        X=xm, Xs=xs, A=a, Ap=ap,
        nabla=np.stack(nab, axis=-3),
        bracket=np.swapaxes(brk, -2, -3),
        G=np.stack(gs, axis=-3),
        TX=np.stack(tx, axis=-3),
        alpha=np.stack(al, axis=-4) if with_alpha else None,
    )


# --- invariant suite -------------------------------------------------------

@dataclass
class InvariantRow:
    name: str
    residual: float
    tolerance: float
    passed: bool


def _row(name, residual, tol):
    residual = float(residual)
    return InvariantRow(name, residual, tol, bool(residual <= tol))


def check_invariants(model, n_points=100, seed=0):
    """Run the geometric invariant suite at random points.

    Returns one :class:`InvariantRow` per property.  Raises the model's own
    errors (spanning, bundle) when the model is structurally invalid.
    """
    rng = np.random.default_rng(seed)
    x = np.concatenate([model.origin[None, :], model.sample_points(rng, n_points - 1)])
    d = model.coord_dim
    rows = []

    margin = spanning_margin(model, x)
    rows.append(InvariantRow("spanning_margin", float(np.min(margin)), model.spanning_floor,
                             bool(np.min(margin) > model.spanning_floor)))
    if not rows[-1].passed:
        # nothing downstream is defined without a metric
        return rows

    def tangent(v):
        return model.project_tangent(x, v)

    # E-reproduction: <Y, X_i> X_i = Y for Y in E
    xm = model.frame_matrix(x)
    xs = model.adjoint_matrix(x)
    y = matvec(xm, rng.standard_normal((n_points, model.noise_dim)))
    rep = np.einsum("...i,...ai->...a", np.einsum("...a,...ai->...i", matvec(xs, y), xs @ xm), xm)
    rows.append(_row("E_reproduction", np.max(np.linalg.norm(rep - y, axis=-1)), 1e-8))

    v = tangent(rng.standard_normal((n_points, d)))
    rows.append(_row("metric_reproduction", np.max(np.linalg.norm(reproduce(model, x, v) - v, axis=-1)), 1e-8))

    # X^*X = I exactly when the frame is pointwise independent
    kres = np.max(np.abs(xs @ xm - np.eye(model.noise_dim)), axis=(-1, -2))
    if model.mode == "linearly_independent":
        rows.append(_row("adjoint_left_inverse", np.max(kres), 1e-10))
    else:
        indep = model.linearly_independent
        consistent = (np.max(kres) <= 1e-10) == indep
        rows.append(InvariantRow("adjoint_left_inverse_iff_independent", float(np.max(kres) if indep else 0.0),
                                 1e-10, bool(consistent)))

    if model.adjoint is not None:
        ref = np.linalg.pinv(xm)
        rows.append(_row("adjoint_matches_pinv", np.max(np.abs(ref - xs)), 1e-10))
    if model.family_pinv is not None:
        ref = np.linalg.pinv(model.family_matrix(x))
        rows.append(_row("family_pinv_matches_pinv", np.max(np.abs(ref - model.family_pinv_matrix(x))), 1e-10))

    worst = 0.0
    for f in tuple(model.frame) + tuple(model.family):
        if f.has_analytic_jacobian:
            scale = max(1.0, float(np.max(np.abs(f.jacobian(x)))))
            worst = max(worst, float(np.max(np.abs(f.jacobian(x) - f.fd_jacobian(x)))) / scale)
    rows.append(_row("jacobian_fd_agreement", worst, 1e-7))

    gmax = 0.0
    for j in range(model.family_size):
        g = coeff_G(model, j, x)
        gmax = max(gmax, float(np.max(np.abs(g + _t(g)))))
    rows.append(InvariantRow("G_antisymmetry", gmax, 0.0, gmax == 0.0))

    fields = list(model.family)
    pairs = [(fields[i], fields[j]) for i in range(len(fields)) for j in range(len(fields)) if i < j]
    br = max((float(np.max(np.abs(lie_bracket(a, b, x) + lie_bracket(b, a, x)))) for a, b in pairs), default=0.0)
    rows.append(_row("bracket_antisymmetry", br, 1e-12))

    tors = 0.0
    compat = 0.0
    for a, b in pairs:
        t = levi_civita_derivative(model, x, a(x), b) - levi_civita_derivative(model, x, b(x), a) - lie_bracket(a, b, x)
        tors = max(tors, float(np.max(np.linalg.norm(t, axis=-1))))
        lhs = fd_directional(lambda yy: model.metric_inner(yy, a(yy), b(yy)), x, v, model.h_fd)
        rhs = model.metric_inner(x, levi_civita_derivative(model, x, v, a), b(x)) + \
            model.metric_inner(x, a(x), levi_civita_derivative(model, x, v, b))
        compat = max(compat, float(np.max(np.abs(lhs - rhs))))
    rows.append(_row("levi_civita_torsion", tors, 1e-7))
    rows.append(_row("levi_civita_metric_compatibility", compat, 1e-7))

    if model.mode == "gradient_system":
        w = rng.standard_normal((n_points, d))
        res = projection_checks(model, x, v, w)
        for key, val in res.items():
            rows.append(_row(f"projection_{key}", np.max(val), 1e-8))
        if model.elliptic:
            e = tangent(rng.standard_normal((n_points, d)))
            tt = tensor_T_intrinsic(model, x, e, v)
            rows.append(_row("intrinsic_T_vanishes", np.max(np.linalg.norm(tt, axis=-1)), 1e-7))
    return rows
