"""Admissible vector fields on path space, their Wiener-space lifts and divergences.

A *construction* takes a simulated batch of paths and a driving object
(a Cameron-Martin path, a random adapted drift, or a skew matrix) and
returns the vector field ``eta`` along each path, its lift ``r~`` to Wiener
space and the divergence integrand ``Div(r~)`` realised on the same path.
By the tower property ``E[(eta Phi)(x)] = E[Phi(x) Div(r~)]``, which is what
the harness in :mod:`pathdiv.verify` checks.

Array conventions follow :mod:`pathdiv.sde`: time-major, batched over paths.
Coefficient processes ``h`` have shape ``(m+1, P, K)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import polynomial as npoly

from . import geometry as geo
from .errors import DimensionError, ModeError, PathDivError, SimulationError
from .geometry import matvec
from .sde import derivative_flow, inverse_flow, parallel_transport, transport_inverse

TAGS = ("thm31", "thm32", "thm34", "thm42", "gradient", "driver", "ricci", "rotation")


# --- driving objects --------------------------------------------------------

class CameronMartinPath:
    """A finite-energy path ``r`` with ``r_0 = 0``.

    Either piecewise linear through ``(knots, values)`` or with polynomial
    derivative ``rdot(t) = sum_j coeffs[j] t^j``.  On a grid the path is
    represented by its exact node values, so per-step slopes are
    ``(r(t_{k+1}) - r(t_k)) / dt``.
    """

    def __init__(self, dim, knots=None, values=None, coeffs=None):
        self.dim = int(dim)
        if (knots is None) == (coeffs is None):
            raise ValueError("give either knots/values or polynomial coeffs")
        if knots is not None:
            knots = np.asarray(knots, dtype=float)
            values = np.asarray(values, dtype=float).reshape(len(knots), self.dim)
            if knots[0] != 0.0 or np.any(np.diff(knots) <= 0):
                raise ValueError("knots must start at 0 and increase strictly")
            if np.any(values[0] != 0.0):
                raise ValueError("a Cameron-Martin path starts at 0")
            self.kind = "piecewise_linear"
        else:
            coeffs = np.asarray(coeffs, dtype=float).reshape(-1, self.dim)
            self.kind = "polynomial"
        self.knots, self._values, self.coeffs = knots, values, coeffs

    @classmethod
    def linear(cls, slope):
        slope = np.atleast_1d(np.asarray(slope, dtype=float))
        return cls(len(slope), coeffs=slope[None, :])

    @classmethod
    def zero(cls, dim):
        return cls(dim, coeffs=np.zeros((1, dim)))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "piecewise_linear":
            return np.stack([np.interp(t, self.knots, self._values[:, c]) for c in range(self.dim)], axis=-1)
        powers = np.arange(1, len(self.coeffs) + 1)
        return (t[..., None] ** powers / powers) @ self.coeffs

    def rdot(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "piecewise_linear":
            idx = np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, len(self.knots) - 2)
            slopes = np.diff(self._values, axis=0) / np.diff(self.knots)[:, None]
            return slopes[idx]
        powers = np.arange(len(self.coeffs))
        return (t[..., None] ** powers) @ self.coeffs

    def values(self, grid):
        """``r(t_k)``, shape ``(m+1, n)``."""
        return self(grid.times)

    def slopes(self, grid):
        """Per-step slopes, shape ``(m, n)``."""
        return np.diff(self.values(grid), axis=0) / grid.dt

    def energy(self, T):
        """``int_0^T |rdot|^2 dt``, exact for both representations."""
        if self.kind == "piecewise_linear":
            sl = np.diff(self._values, axis=0) / np.diff(self.knots)[:, None]
            seg = np.diff(np.clip(self.knots, 0, T))
            return float(np.sum(seg[:, None] * sl**2))
        total = 0.0
        for c in range(self.dim):
            sq = npoly.polyint(npoly.polymul(self.coeffs[:, c], self.coeffs[:, c]))
            total += npoly.polyval(T, sq)
        return float(total)

    def scaled(self, c):
        if self.kind == "piecewise_linear":
            return CameronMartinPath(self.dim, self.knots, c * self._values)
        return CameronMartinPath(self.dim, coeffs=c * self.coeffs)

    def __add__(self, other):
        if self.kind == other.kind == "polynomial":
            k = max(len(self.coeffs), len(other.coeffs))
            pad = lambda a: np.vstack([a, np.zeros((k - len(a), self.dim))])
            return CameronMartinPath(self.dim, coeffs=pad(self.coeffs) + pad(other.coeffs))
        knots = np.union1d(self._knots_or_default(other), other._knots_or_default(self))
        return CameronMartinPath(self.dim, knots, self(knots) + other(knots))

    def _knots_or_default(self, other):
        if self.kind == "piecewise_linear":
            return self.knots
        return np.linspace(0.0, other.knots[-1], 1025)


@dataclass
class WienerTangent:
    """``r = int A dw + int B dt`` with skew ``A`` sampled at the grid nodes.

    ``B`` is the Itô drift; ``B_strat`` is the drift of the same tangent
    written with the Stratonovich integral ``int A o dw`` (they differ by the
    Itô-Stratonovich correction).  ``A`` may be ``None`` (no rotation part).
    """

    B: np.ndarray
    A: Optional[np.ndarray] = None
    B_strat: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.B_strat is None:
            self.B_strat = self.B

    @classmethod
    def from_cm(cls, r, grid, paths):
        b = np.broadcast_to(r.slopes(grid)[:, None, :], (grid.steps, paths, r.dim)).copy()
        return cls(b)

    @classmethod
    def rotation(cls, A, grid, paths):
        A = np.asarray(A, dtype=float)
        n = A.shape[-1]
        nodes = np.broadcast_to(A, (grid.steps + 1, paths, n, n)).copy()
        return cls(np.zeros((grid.steps, paths, n)), nodes)

    def skew_residual(self):
        if self.A is None:
            return 0.0
        return float(np.max(np.abs(self.A + np.swapaxes(self.A, -1, -2))))

    def increments(self, dw, dt, form="ito"):
        """Per-step increments ``(m, P, n)`` in Itô or Stratonovich (midpoint) form."""
        if form == "ito":
            out = self.B * dt
            if self.A is not None:
                out = out + matvec(self.A[:-1], dw)
            return out
        if form == "stratonovich":
            out = self.B_strat * dt
            if self.A is not None:
                out = out + matvec(0.5 * (self.A[:-1] + self.A[1:]), dw)
            return out
        raise ValueError(f"unknown form {form!r}")

    def values(self, dw, dt, form="ito"):
        inc = self.increments(dw, dt, form)
        out = np.zeros((inc.shape[0] + 1,) + inc.shape[1:])
        np.cumsum(inc, axis=0, out=out[1:])
        return out

    def __add__(self, other):
        a = self.A if other.A is None else (other.A if self.A is None else self.A + other.A)
        return WienerTangent(self.B + other.B, a, self.B_strat + other.B_strat)


@dataclass
class CoefficientProcess:
    h: np.ndarray

    def __post_init__(self):
        if np.any(self.h[0] != 0.0):
            raise PathDivError("coefficient process must start at 0")


@dataclass
class PathVectorField:
    eta: np.ndarray
    tag: str

    def tangency_residual(self, model, x):
        return np.max(np.linalg.norm(model.project_tangent(x, self.eta) - self.eta, axis=-1))


@dataclass
class DivergenceValue:
    """``value = cm_part + correction_part`` per path."""

    value: np.ndarray
    cm_part: np.ndarray
    correction_part: np.ndarray


@dataclass
class Construction:
    tag: str
    eta: PathVectorField
    lift: WienerTangent
    div: DivergenceValue
    h: Optional[CoefficientProcess] = None
    extras: dict = field(default_factory=dict)


def _div(cm, corr):
    return DivergenceValue(cm + corr, cm, corr)


def _ito_sum(f, dw):
    return np.sum(f * dw, axis=(0, -1))


def _rdot_steps(driving, grid, paths, n):
    """Per-step drift ``(m, P, n)`` from a Cameron-Martin path or an array."""
    if driving is None:
        return np.zeros((grid.steps, paths, n))
    if isinstance(driving, CameronMartinPath):
        if driving.dim != n:
            raise DimensionError(f"driving path has dimension {driving.dim}, expected {n}")
        return np.broadcast_to(driving.slopes(grid)[:, None, :], (grid.steps, paths, n)).copy()
    arr = np.asarray(driving, dtype=float)
    if arr.shape != (grid.steps, paths, n):
        raise DimensionError(f"drift array has shape {arr.shape}, expected {(grid.steps, paths, n)}")
    return arr


# --- the Ito map lift -----------------------------------------------------

def lift_via_ito_map(model, path, r):
    """``eta_t = Y_t int Z_s X_i(x_s) o dr_i`` by midpoint quadrature."""
    if path.Y is None or path.Z is None:
        raise SimulationError("lift_via_ito_map needs Y and Z on the path")
    if isinstance(r, CameronMartinPath):
        r = WienerTangent.from_cm(r, path.grid, path.paths)
    dr = r.increments(path.dw, path.grid.dt, form="stratonovich")
    zx = path.Z @ model.frame_matrix(path.x)
    inc = matvec(0.5 * (zx[:-1] + zx[1:]), dr)
    q = np.zeros(path.x.shape)
    np.cumsum(inc, axis=0, out=q[1:])
    return PathVectorField(matvec(path.Y, q), "ito_map")


# --- coefficient systems --------------------------------------------------

@dataclass
class _Node:
    """Per-node pieces of the coefficient systems (leading batch axes)."""

    force: np.ndarray    # (..., K, n)  (X_i, V_I)
    C: np.ndarray        # (..., n, K, K)  (T_J(X_k), V_I) as C[k, I, J]
    G: Optional[np.ndarray]      # (..., K, n, n); None when identically zero
    alpha: Optional[np.ndarray]  # (..., K, n, n, n)

    def at(self, j):
        pick = lambda a: None if a is None else a[j]
        return _Node(self.force[j], self.C[j], pick(self.G), pick(self.alpha))


def _node(model, x, with_alpha, swap_inner=False):
    nt = geo.node_tensors(model, x, with_alpha=with_alpha)
    if swap_inner:
        # <u, V_I> = (X^* u).(X^* V_I): a (K, D) row operator
        proj = np.swapaxes(nt.Xs @ nt.A, -1, -2) @ nt.Xs
    else:
        proj = nt.Ap
    force = proj @ nt.X
    # C[k, I, J] = proj[I, :] . TX[J, k, :]
    # C[k, I, J] = proj[I, :] . TX[J, k, :]
    C = proj[..., None, :, :] @ np.moveaxis(nt.TX, -3, -1)
    G = None if model.linearly_independent or model.constant_frame else nt.G
    return _Node(force, C, G, nt.alpha)


class _NodeStream:
    """Node data along a path, computed in chunks of consecutive time nodes."""

    def __init__(self, model, x, with_alpha, swap_inner=False, chunk=32):
        self.model, self.x, self.with_alpha, self.swap = model, x, with_alpha, swap_inner
        self.chunk = chunk
        self.lo, self.hi, self.data = 0, 0, None

    def __getitem__(self, k):
        if not self.lo <= k < self.hi:
            self.lo, self.hi = k, min(k + self.chunk, self.x.shape[0])
            self.data = _node(self.model, self.x[self.lo:self.hi], self.with_alpha, self.swap)
        return self.data.at(k - self.lo)


def _mv(m, v):
    return np.matmul(m, v[..., None])[..., 0]


def _correction(nd, h):
    """``c_i = alpha_I^{kik} h_I + G_I^{ik} beta_I^k`` with ``beta_I^k = -C[k,I,J] h_J``."""
    if nd.G is None:
        return np.zeros(nd.force.shape[:-2] + (nd.force.shape[-1],))
    beta = -_mv(nd.C, h[..., None, :])                  # (..., k, I)
    c = np.einsum("...Iik,...kI->...i", nd.G, beta)
    if nd.alpha is not None:
        c = c + np.einsum("...Ikik,...I->...i", nd.alpha, h)
    return c


def _rotation(nd, h):
    if nd.G is None:
        n = nd.force.shape[-1]
        return np.zeros(h.shape[:-1] + (n, n))
    return np.einsum("...Iij,...I->...ij", nd.G, h)


def _needs_alpha(model):
    return not (model.linearly_independent or model.constant_frame)


def _linear_h_solve(model, path, drive, drift_adjust=False, gamma_fn=None, dr=None,
                    swap_inner=False):
    """Heun solution of ``dh = F(x)(u - 1/2 c adj) dt - C(x)[o dw] h``.

    ``drive`` is the per-step ``(m, P, n)`` drift multiplying ``(X_i, V_I)``;
    ``gamma_fn(k, x_k, h_k)`` overrides it step by step (it may read ``h_k``);
    ``dr`` adds a Stratonovich forcing ``(X_i, V_I) o dr_i``.
    Returns ``h``, per-node ``G h`` (the rotation part of the lift), the
    left-node corrections ``c`` and the drift actually used per step.
    """
    x, dw, dt = path.x, path.dw, path.grid.dt
    m, P, n = dw.shape[0], path.paths, model.noise_dim
    K = model.family_size
    if model.constant_frame and gamma_fn is None:
        return _constant_h_solve(model, path, drive, dr, swap_inner)
    nodes = _NodeStream(model, x, _needs_alpha(model), swap_inner)
    h = np.zeros((m + 1, P, K))
    rot = np.zeros((m + 1, P, n, n))
    corr = np.zeros((m + 1, P, n))
    used = np.zeros((m, P, n))
    nd = nodes[0]
    for k in range(m):
        hk = h[k]
        corr[k] = _correction(nd, hk)
        rot[k] = _rotation(nd, hk)
        u = drive[k] if gamma_fn is None else gamma_fn(k, x[k], hk)
        used[k] = u
        nn = nodes[k + 1]
        dwk = dw[k]

        def rhs(node, hh, c):
            eff = u - 0.5 * c if drift_adjust else u
            if dr is not None:
                eff = eff * dt + dr[k]
            else:
                eff = eff * dt
            cm = node.C
            mk = (dwk[..., None, :] @ cm.reshape(cm.shape[:-3] + (cm.shape[-3], -1))).reshape(cm.shape[:-3] + cm.shape[-2:])
            return _mv(node.force, eff) - _mv(mk, hh)

        f0 = rhs(nd, hk, corr[k])
        hs = hk + f0
        f1 = rhs(nn, hs, _correction(nn, hs) if drift_adjust else None)
        h[k + 1] = hk + 0.5 * (f0 + f1)
        nd = nn
    corr[m] = _correction(nd, h[m])
    rot[m] = _rotation(nd, h[m])
    return h, rot, corr, used


def assemble_eta(h, model, path, tag="thm31"):
    """``eta_t = h_I(t) V_I(x_t)``."""
    hh = h.h if isinstance(h, CoefficientProcess) else h
    return PathVectorField(np.einsum("...aI,...I->...a", model.family_matrix(path.x), hh), tag)


def solve_h_thm31(model, path, r, swap_inner=False):
    """``dh_I = (X_i, V_I) rdot_i dt - (T_J(o dx), V_I) h_J`` with ``h(0) = 0``."""
    drive = _rdot_steps(r, path.grid, path.paths, model.noise_dim)
    h, _, _, _ = _linear_h_solve(model, path, drive, swap_inner=swap_inner)
    return CoefficientProcess(h)


def build_lift(model, path, r, h):
    """Lift ``r~_i = r_i + int G_I^{ij} h_I o dw_j`` in Itô and midpoint form."""
    hh = h.h if isinstance(h, CoefficientProcess) else h
    rdot = _rdot_steps(r, path.grid, path.paths, model.noise_dim)
    rot, corr = _rotation_and_correction(model, path, hh)
    return WienerTangent(rdot + 0.5 * corr[:-1], rot, rdot)


def _constant_h_solve(model, path, drive, dr, swap_inner):
    # constant fields: C, G and alpha vanish and h is a plain cumulative sum
    m, P, n = path.dw.shape
    force = _node(model, model.origin, False, swap_inner).force
    inc = drive * path.grid.dt if dr is None else drive * path.grid.dt + dr
    h = np.zeros((m + 1, P, model.family_size))
    np.cumsum(inc @ force.T, axis=0, out=h[1:])
    return h, np.zeros((m + 1, P, n, n)), np.zeros((m + 1, P, n)), np.asarray(drive)


def _rotation_and_correction(model, path, h):
    m1, P, n = h.shape[0], h.shape[1], model.noise_dim
    rot = np.zeros((m1, P, n, n))
    corr = np.zeros((m1, P, n))
    if model.constant_frame:
        return rot, corr
    nodes = _NodeStream(model, path.x, _needs_alpha(model))
    for k in range(m1):
        nd = nodes[k]
        rot[k] = _rotation(nd, h[k])
        corr[k] = _correction(nd, h[k])
    return rot, corr


def divergence_thm31(model, path, r, h):
    """``int (rdot_i + 1/2 (alpha_I^{kik} h_I + G_I^{ik} beta_I^k)) dw_i`` (Itô sum)."""
    hh = h.h if isinstance(h, CoefficientProcess) else h
    rdot = _rdot_steps(r, path.grid, path.paths, model.noise_dim)
    _, corr = _rotation_and_correction(model, path, hh)
    return _div(_ito_sum(rdot, path.dw), _ito_sum(0.5 * corr[:-1], path.dw))


def construct_thm31(model, path, r, swap_inner=False):
    drive = _rdot_steps(r, path.grid, path.paths, model.noise_dim)
    h, rot, corr, _ = _linear_h_solve(model, path, drive, swap_inner=swap_inner)
    lift = WienerTangent(drive + 0.5 * corr[:-1], rot, drive)
    div = _div(_ito_sum(drive, path.dw), _ito_sum(0.5 * corr[:-1], path.dw))
    return Construction("thm31", assemble_eta(h, model, path, "thm31"), lift, div, CoefficientProcess(h))


def solve_h_thm42(model, path, r):
    """``dh_I = (X_i, V_I) o dr_i - ([X_i, V_J], V_I) h_J o dw_i`` (independent frames)."""
    if not model.linearly_independent:
        raise ModeError(f"{model.name}: thm42 requires linearly independent diffusion fields")
    if isinstance(r, CameronMartinPath):
        r = WienerTangent.from_cm(r, path.grid, path.paths)
    dr = r.increments(path.dw, path.grid.dt, form="ito")
    zero = np.zeros((path.grid.steps, path.paths, model.noise_dim))
    h, _, _, _ = _linear_h_solve(model, path, zero, dr=dr)
    return CoefficientProcess(h), r


def construct_thm42(model, path, r):
    h, rt = solve_h_thm42(model, path, r)
    div = _div(_ito_sum(rt.B, path.dw), np.zeros(path.paths))
    return Construction("thm42", assemble_eta(h, model, path, "thm42"), rt, div, h)


def solve_h_thm32(model, path, gamma, swap_inner=False):
    """Drift-adjusted system whose field has divergence ``int gamma_dot . dw``.

    ``dh_I = (X_i, V_I)(gamma_dot_i - 1/2 c_i) dt - (T_J(o dx), V_I) h_J`` with
    ``c_i = alpha_J^{kik} h_J + G_J^{ik} beta_J^k``.  ``gamma`` is a
    Cameron-Martin path, an ``(m, P, n)`` array, or a callable
    ``gamma(k, x_k, eta_k) -> (P, n)`` evaluated with information up to ``t_k``.
    """
    return construct_thm32(model, path, gamma, swap_inner=swap_inner).h, None


def construct_thm32(model, path, gamma, tag="thm32", swap_inner=False):
    gamma_fn = None
    drive = None
    if callable(gamma) and not isinstance(gamma, CameronMartinPath):
        def gamma_fn(k, xk, hk):
            eta = np.einsum("...aI,...I->...a", model.family_matrix(xk), hk)
            return gamma(k, xk, eta)
    else:
        drive = _rdot_steps(gamma, path.grid, path.paths, model.noise_dim)
    h, rot, corr, used = _linear_h_solve(model, path, drive, drift_adjust=True, gamma_fn=gamma_fn,
                                         swap_inner=swap_inner)
    lift = WienerTangent(used, rot, used - 0.5 * corr[:-1])
    div = _div(_ito_sum(used, path.dw), np.zeros(path.paths))
    return Construction(tag, assemble_eta(h, model, path, tag), lift, div, CoefficientProcess(h),
                        {"gamma_dot": used})


def example33_gamma(model, B, rho=None, grid=None):
    """``gamma_dot_i(t) = rho(t) (B, X_i)(x_t)`` as a callable for :func:`construct_thm32`."""
    rho = (lambda t: 1.0) if rho is None else rho
    B = geo.as_field(B)

    def gamma_dot(k, xk, eta):
        return rho(k * grid.dt) * _metric_with_frame(model, xk, B(xk))

    return gamma_dot


def _metric_with_frame(model, x, v):
    """``(v, X_i)`` for every i."""
    ap = model.family_pinv_matrix(x)
    return np.einsum("...I,...Ii->...i", matvec(ap, v), ap @ model.frame_matrix(x))


def measurable_divergence(model, path, B, rho=None):
    """Path functional ``int rho (B, o dx) - 1/2 int rho ((nabla~_{X_i} B, X_i) + (B, nabla~_{X_i} X_i)) dt``."""
    rho = (lambda t: 1.0) if rho is None else rho
    B = geo.as_field(B)
    x, dt = path.x, path.grid.dt
    t = path.grid.times
    m = x.shape[0] - 1
    bvals = B(x)
    if model.embedding is None:
        cov = matvec(geo.lower_metric(model, x), bvals)
    else:
        cov = model.project_tangent(x, bvals)
    rk = np.array([rho(s) for s in t])
    mid_r = 0.5 * (rk[:-1] + rk[1:])
    dx = x[1:] - x[:-1]
    strat = np.sum(mid_r[:, None] * np.sum(0.5 * (cov[:-1] + cov[1:]) * dx, axis=-1), axis=0)
    drift = np.zeros(path.paths)
    for k in range(m):
        xk = x[k]
        acc = 0.0
        for xi in model.frame:
            vi = xi(xk)
            acc = acc + model.metric_inner(xk, geo.levi_civita_derivative(model, xk, vi, B), vi)
            acc = acc + model.metric_inner(xk, bvals[k], geo.levi_civita_derivative(model, xk, vi, xi))
        drift += rk[k] * acc * dt
    corr = -0.5 * drift
    return _div(strat, corr)


def construct_ricci(model, path, r, swap_inner=False):
    """Field with divergence ``int (rdot_i + 1/2 <Ric(eta), X_i>) dw_i``.

    The drift at step k reads ``eta_k``, which is known before the step.
    """
    rdot = _rdot_steps(r, path.grid, path.paths, model.noise_dim)

    def gamma(k, xk, eta):
        return rdot[k] + 0.5 * geo.ricci_contraction(model, xk, eta)

    con = construct_thm32(model, path, gamma, tag="ricci", swap_inner=swap_inner)
    return con


def ricci_divergence(model, path, r):
    con = construct_ricci(model, path, r)
    return con.eta, con.div


# --- intrinsic construction ----------------------------------------------

def _require_riemannian(model):
    if model.rank_E != model.dim:
        raise ModeError(f"{model.name}: the intrinsic construction needs E = TM (rank {model.rank_E} < {model.dim})")


def _ensure_transport(model, path):
    if path.U is None:
        parallel_transport(model, path)
    return path.U


def _intrinsic_term(model, x, eta, dxe):
    """``<nabla_eta X_j, dx> X_j + T(dx, eta)`` with ``dx in E``."""
    nab = geo.ljw_frame_derivative(model, x, eta)
    xs = model.adjoint_matrix(x)
    coef = np.einsum("...aj,...a->...j", xs @ nab, matvec(xs, dxe))
    out = matvec(model.frame_matrix(x), coef)
    return out + geo.tensor_T_intrinsic(model, x, dxe, eta)


def intrinsic_alpha_series(model, x, eta):
    """``alpha_i`` at every node, shape ``(m+1, P, n)``."""
    out = np.zeros(eta.shape[:-1] + (model.noise_dim,))
    for k in range(x.shape[0]):
        out[k] = geo.intrinsic_alpha(model, x[k], eta[k])
    return out


def _g_eta_lift(model, path, eta, drift, alpha):
    """Lift ``r~_i = r_i - int G_eta^{ji} o dw_j`` (Itô drift ``drift - 1/2 alpha``)."""
    g = geo.coeff_G_along(model, path.x, eta)
    rot = -np.swapaxes(g, -1, -2)
    return WienerTangent(drift - 0.5 * alpha[:-1], rot, drift)


def _div_from_alpha(path, drift, alpha):
    return _div(_ito_sum(drift, path.dw), _ito_sum(-0.5 * alpha[:-1], path.dw))


def intrinsic_eta(model, path, r, general=True):
    """Solve the covariant equation for ``eta`` in the initial tangent frame.

    ``D~ eta = [<nabla_eta X_j, .> X_j + T(., eta)](o dx) + X_i o dr_i`` with
    ``y = U^{-1} eta`` stepped by Heun; ``o dx`` is taken as ``X_k o dw_k``.
    ``r`` is a Cameron-Martin path or a :class:`WienerTangent`.  With
    ``general=False`` the bracketed term is dropped (gradient systems, where
    it vanishes identically).
    """
    _require_riemannian(model)
    U = _ensure_transport(model, path)
    Ui = transport_inverse(model, U)
    x, dw, dt = path.x, path.dw, path.grid.dt
    if isinstance(r, CameronMartinPath):
        r = WienerTangent.from_cm(r, path.grid, path.paths)
    dr = r.increments(dw, dt, form="stratonovich")
    xm = model.frame_matrix(x)
    m = dw.shape[0]
    y = np.zeros(x.shape)
    eta = np.zeros(x.shape)
    for k in range(m):
        src0 = matvec(xm[k], dr[k])
        src1 = matvec(xm[k + 1], dr[k])
        f0 = matvec(Ui[k], src0)
        if general:
            f0 = f0 + matvec(Ui[k], _intrinsic_term(model, x[k], eta[k], matvec(xm[k], dw[k])))
        ys = y[k] + f0
        f1 = matvec(Ui[k + 1], src1)
        if general:
            es = matvec(U[k + 1], ys)
            f1 = f1 + matvec(Ui[k + 1], _intrinsic_term(model, x[k + 1], es, matvec(xm[k + 1], dw[k])))
        y[k + 1] = y[k] + 0.5 * (f0 + f1)
        eta[k + 1] = matvec(U[k + 1], y[k + 1])
    return PathVectorField(eta, "thm34"), r


def construct_thm34(model, path, r, general=True):
    field_, rt = intrinsic_eta(model, path, r, general=general)
    alpha = intrinsic_alpha_series(model, path.x, field_.eta)
    lift = _g_eta_lift(model, path, field_.eta, rt.B_strat, alpha)
    if rt.A is not None:
        lift = WienerTangent(lift.B, lift.A + rt.A, lift.B_strat)
    return Construction("thm34", field_, lift, _div_from_alpha(path, rt.B_strat, alpha),
                        extras={"alpha": alpha})


def gradient_eta(model, path, rdot):
    """``eta_t = U_t int U_s^{-1} X_i(x_s) rdot_i ds`` (trapezoid)."""
    if model.mode != "gradient_system":
        raise ModeError(f"{model.name}: gradient constructor requires gradient_system mode")
    U = _ensure_transport(model, path)
    Ui = transport_inverse(model, U)
    rdot = _rdot_steps(rdot, path.grid, path.paths, model.noise_dim)
    ux = Ui @ model.frame_matrix(path.x)
    inc = matvec(0.5 * (ux[:-1] + ux[1:]), rdot) * path.grid.dt
    q = np.zeros(path.x.shape)
    np.cumsum(inc, axis=0, out=q[1:])
    return PathVectorField(matvec(U, q), "gradient")


def construct_gradient(model, path, r):
    field_ = gradient_eta(model, path, r)
    rdot = _rdot_steps(r, path.grid, path.paths, model.noise_dim)
    alpha = intrinsic_alpha_series(model, path.x, field_.eta)
    return Construction("gradient", field_, _g_eta_lift(model, path, field_.eta, rdot, alpha),
                        _div_from_alpha(path, rdot, alpha), extras={"alpha": alpha})


def driver_field(model, path, hcm):
    """``eta_t = U_t h_t`` and the drift ``rdot_i = <U_t h_dot_t, X_i>`` that induces it."""
    if model.mode != "gradient_system":
        raise ModeError(f"{model.name}: driver field requires gradient_system mode")
    U = _ensure_transport(model, path)
    grid = path.grid
    hv = hcm.values(grid)
    tang = model.project_tangent(model.origin, hv)
    if np.max(np.abs(tang - hv)) > 1e-10:
        raise DimensionError("driver path must lie in the tangent space at the base point")
    eta = matvec(U, np.broadcast_to(hv[:, None, :], path.x.shape))
    hdot = np.broadcast_to(hcm.slopes(grid)[:, None, :], path.x[:-1].shape)
    uh = matvec(U[:-1], hdot)
    xs = model.adjoint_matrix(path.x[:-1])
    rdot = np.einsum("...a,...ai->...i", matvec(xs, uh), xs @ model.frame_matrix(path.x[:-1]))
    return PathVectorField(eta, "driver"), rdot


def construct_driver(model, path, hcm):
    field_, rdot = driver_field(model, path, hcm)
    alpha = intrinsic_alpha_series(model, path.x, field_.eta)
    return Construction("driver", field_, _g_eta_lift(model, path, field_.eta, rdot, alpha),
                        _div_from_alpha(path, rdot, alpha), extras={"alpha": alpha, "rdot": rdot})


def recover_lift(model, path, eta, r):
    """``r_bar_i = r_i + int G_eta^{ji} o dw_j``, the driving tangent of the intrinsic field."""
    e = eta.eta if isinstance(eta, PathVectorField) else eta
    if isinstance(r, CameronMartinPath):
        r = WienerTangent.from_cm(r, path.grid, path.paths)
    g = geo.coeff_G_along(model, path.x, e)
    add = np.swapaxes(g, -1, -2)
    a = add if r.A is None else r.A + add
    return WienerTangent(r.B, a, r.B_strat)


def construct_rotation(model, path, A):
    """``r = int A dw`` with a constant skew matrix; ``eta = dg(w) r`` has divergence 0."""
    A = np.asarray(A, dtype=float)
    if np.max(np.abs(A + A.T)) != 0.0:
        raise ValueError("rotation generator must be skew-symmetric")
    r = WienerTangent.rotation(A, path.grid, path.paths)
    if model.noise_dim == model.coord_dim and geo.is_gradient_frame(model, model.origin) and model.embedding is not None \
            and np.all(model.embedding.dP(model.origin, np.ones(model.coord_dim)) == 0):
        # flat space: the Ito map is the identity
        eta = PathVectorField(r.values(path.dw, path.grid.dt, "stratonovich"), "rotation")
    else:
        if path.Y is None:
            derivative_flow(model, path)
            inverse_flow(path)
        eta = lift_via_ito_map(model, path, r)
        eta.tag = "rotation"
    z = np.zeros(path.paths)
    return Construction("rotation", eta, r, _div(z, z))


CONSTRUCTORS = {
    "thm31": construct_thm31,
    "thm32": construct_thm32,
    "thm34": construct_thm34,
    "thm42": construct_thm42,
    "gradient": construct_gradient,
    "driver": construct_driver,
    "ricci": construct_ricci,
    "rotation": construct_rotation,
}


def construct(tag, model, path, driving, **kwargs):
    try:
        fn = CONSTRUCTORS[tag]
    except KeyError:
        raise PathDivError(f"unknown constructor {tag!r}") from None
    return fn(model, path, driving, **kwargs)
