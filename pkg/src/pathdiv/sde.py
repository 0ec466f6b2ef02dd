"""Heun discretisation of the Stratonovich SDE and of the processes that ride on it.

Arrays are time-major and batched over paths: states ``x`` have shape
``(m+1, P, D)``, increments ``dw`` have shape ``(m, P, n)`` and matrix
processes (``Y``, ``Z``, ``U``) have shape ``(m+1, P, D, D)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import DimensionError, NotInBundleError, SimulationError
from .geometry import christoffel, lie_bracket, lower_metric, matvec

BUNDLE_TOL = 1e-8


@dataclass(frozen=True)
class TimeGrid:
    T: float
    steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError(f"steps must be a non-negative integer, got {self.steps}")

    @classmethod
    def from_dt(cls, T, dt):
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        steps = int(round(T / dt))
        if steps < 1 or abs(steps * dt - T) > 1e-9 * T:
            raise ValueError(f"T={T} is not an integer multiple of dt={dt}")
        return cls(T, steps)

    @property
    def dt(self):
        return self.T / self.steps if self.steps else 0.0

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.steps + 1)

    def index(self, t):
        """Nearest grid index to ``t`` and whether ``t`` sat on the grid."""
        k = int(round(t / self.dt))
        k = min(max(k, 0), self.steps)
        return k, bool(abs(k * self.dt - t) <= 1e-9 * max(1.0, self.T))

    def coarsen(self, factor):
        if self.steps % factor:
            raise ValueError(f"{self.steps} steps not divisible by {factor}")
        return TimeGrid(self.T, self.steps // factor)


def path_generator(seed, stream_id):
    """Counter-based generator owned by one path; keyed by (seed, stream_id)."""
    key = np.array([seed, stream_id], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class NoisePath:
    """Brownian increments of one or more paths.

    ``increments`` has shape ``(m, P, n)``.  Increments of path ``p`` are the
    first ``m*n`` normals of its own stream, so a shorter grid sees a prefix of
    the same draws.
    """

    grid: TimeGrid
    increments: np.ndarray
    seed: int = 0
    stream_ids: tuple = (0,)

    @classmethod
    def generate(cls, grid, n, seed, stream_ids=0):
        ids = (stream_ids,) if np.isscalar(stream_ids) else tuple(int(s) for s in stream_ids)
        per_path = np.empty((len(ids), grid.steps, n))
        for p, sid in enumerate(ids):
            path_generator(seed, sid).standard_normal((grid.steps, n), out=per_path[p])
        out = np.ascontiguousarray(per_path.transpose(1, 0, 2))
        out *= np.sqrt(grid.dt)
        return cls(grid, out, seed, ids)

    @classmethod
    def zeros(cls, grid, n, paths=1):
        return cls(grid, np.zeros((grid.steps, paths, n)), 0, tuple(range(paths)))

    @property
    def noise_dim(self):
        return self.increments.shape[-1]

    @property
    def paths(self):
        return self.increments.shape[1]

    def coarsen(self, factor):
        """Block sums of ``factor`` consecutive increments (same Brownian path)."""
        m, p, n = self.increments.shape
        if m % factor:
            raise ValueError(f"{m} steps not divisible by {factor}")
        inc = self.increments.reshape(m // factor, factor, p, n).sum(axis=1)
        return NoisePath(self.grid.coarsen(factor), inc, self.seed, self.stream_ids)

    def truncate(self, steps):
        """Keep only the first ``steps`` increments (the rest zeroed)."""
        inc = self.increments.copy()
        inc[steps:] = 0.0
        return NoisePath(self.grid, inc, self.seed, self.stream_ids)

    def w(self):
        """Cumulative path ``w_{t_k}``, shape ``(m+1, P, n)``."""
        out = np.zeros((self.increments.shape[0] + 1,) + self.increments.shape[1:])
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out


@dataclass
class SamplePath:
    model_name: str
    grid: TimeGrid
    noise: NoisePath
    x: np.ndarray
    xpred: Optional[np.ndarray] = None
    Y: Optional[np.ndarray] = None
    Z: Optional[np.ndarray] = None
    U: Optional[np.ndarray] = None
    finite: Optional[np.ndarray] = None

    @property
    def dw(self):
        return self.noise.increments

    @property
    def paths(self):
        return self.x.shape[1]

    def select(self, index):
        """Sub-batch of paths, e.g. ``path.select([3])``."""
        pick = lambda a: None if a is None else a[:, index]
        return SamplePath(
            self.model_name, self.grid,
            NoisePath(self.grid, self.noise.increments[:, index], self.noise.seed,
                      tuple(np.asarray(self.noise.stream_ids)[index].tolist())
                      if np.ndim(np.asarray(self.noise.stream_ids)[index]) else
                      (int(np.asarray(self.noise.stream_ids)[index]),)),
            pick(self.x), pick(self.xpred), pick(self.Y), pick(self.Z), pick(self.U),
            None if self.finite is None else self.finite[index],
        )

    def to_csv(self, fh, path_index=0):
        """Write one path as CSV.

        Columns: ``t, x0..x{D-1}, has_Y, has_Z, has_U`` followed by the
        row-major entries of each present matrix block (``Y00..``, ``Z00..``,
        ``U00..``).
        """
        d = self.x.shape[-1]
        blocks = [(nm, a) for nm, a in (("Y", self.Y), ("Z", self.Z), ("U", self.U)) if a is not None]
        head = ["t"] + [f"x{j}" for j in range(d)] + ["has_Y", "has_Z", "has_U"]
        for nm, a in blocks:
            head += [f"{nm}{i}{j}" for i in range(a.shape[-2]) for j in range(a.shape[-1])]
        wr = csv.writer(fh)
        wr.writerow(head)
        flags = [int(self.Y is not None), int(self.Z is not None), int(self.U is not None)]
        for k, t in enumerate(self.grid.times):
            row = [repr(float(t))] + [repr(float(v)) for v in self.x[k, path_index]] + flags
            for _, a in blocks:
                row += [repr(float(v)) for v in a[k, path_index].ravel()]
            wr.writerow(row)


def _increment(model, x, dw, dt):
    out = np.einsum("...ai,...i->...a", model.frame_matrix(x), dw)
    if model.drift is not None:
        out = out + model.drift(x) * dt
    return out


def _jac_increment(model, x, dw, dt):
    out = np.einsum("...iab,...i->...ab", model.frame_jacobians(x), dw)
    if model.drift is not None:
        out = out + model.drift.jacobian(x) * dt
    return out


def simulate(model, grid, noise, x0=None, flow=False, strict=True, keep_predictor=True):
    """Heun (stochastic trapezoid) solution of ``dx = X_i(x) o dw_i + V(x) dt``.

    Embedded models are retracted onto the manifold after every step.  With
    ``strict`` a non-finite state or a constraint violation beyond the model's
    hard limit raises :class:`SimulationError`; otherwise the offending paths
    are filled with NaN and flagged in ``finite``.
    """
    if isinstance(noise, np.ndarray):
        noise = NoisePath(grid, noise)
    dw = noise.increments
    if dw.shape[0] != grid.steps:
        raise DimensionError(f"noise has {dw.shape[0]} steps, grid has {grid.steps}")
    if dw.shape[-1] != model.noise_dim:
        raise DimensionError(f"noise dimension {dw.shape[-1]} != frame size {model.noise_dim}")
    P, D, dt = dw.shape[1], model.coord_dim, grid.dt
    x = np.empty((grid.steps + 1, P, D))
    x[0] = model.origin if x0 is None else x0
    xp = np.empty((grid.steps, P, D)) if keep_predictor or flow else None
    Y = None
    if flow:
        Y = np.empty((grid.steps + 1, P, D, D))
        Y[0] = np.eye(D)
    finite = np.ones(P, dtype=bool)
    emb = model.embedding
    limit = 0.5
    for k in range(grid.steps):
        xk = x[k]
        f0 = _increment(model, xk, dw[k], dt)
        xs = xk + f0
        f1 = _increment(model, xs, dw[k], dt)
        xn = xk + 0.5 * (f0 + f1)
        if flow:
            j0 = _jac_increment(model, xk, dw[k], dt)
            ys = Y[k] + j0 @ Y[k]
            Y[k + 1] = Y[k] + 0.5 * (j0 @ Y[k] + _jac_increment(model, xs, dw[k], dt) @ ys)
        if emb is not None:
            res = np.abs(emb.constraint(xn))
            bad = ~(res <= limit)
            xn = emb.retract(xn)
        else:
            bad = np.zeros(P, dtype=bool)
        bad |= ~np.all(np.isfinite(xn), axis=-1)
        if np.any(bad):
            if strict:
                raise SimulationError(
                    f"{model.name}: path left the admissible region at step {k + 1} "
                    f"({int(bad.sum())} of {P} paths)"
                )
            finite &= ~bad
            xn[bad] = np.nan
        x[k + 1] = xn
        if xp is not None:
            xp[k] = xs
    return SamplePath(model.name, grid, noise, x, xp, Y, None, None, finite)


def derivative_flow(model, path):
    """Fill ``path.Y`` with the variational solution ``dY = dX_i(x) Y o dw_i + dV(x) Y dt``.

    Stepped with the same Heun predictor as :func:`simulate`, so ``Y`` is the
    exact jacobian of the discrete flow map (before retraction).
    """
    dw, dt = path.dw, path.grid.dt
    m, P, D = dw.shape[0], path.paths, model.coord_dim
    Y = np.empty((m + 1, P, D, D))
    Y[0] = np.eye(D)
    for k in range(m):
        xk = path.x[k]
        xs = path.xpred[k] if path.xpred is not None else xk + _increment(model, xk, dw[k], dt)
        j0 = _jac_increment(model, xk, dw[k], dt)
        a = j0 @ Y[k]
        Y[k + 1] = Y[k] + 0.5 * (a + _jac_increment(model, xs, dw[k], dt) @ (Y[k] + a))
    path.Y = Y
    return path


def inverse_flow(path):
    """``Z_k = Y_k^{-1}`` by direct inversion."""
    if path.Y is None:
        raise SimulationError("derivative flow not computed")
    try:
        path.Z = np.linalg.inv(path.Y)
    except np.linalg.LinAlgError as exc:
        raise SimulationError(f"derivative flow is singular: {exc}") from None
    return path


def pullback_evolution(model, path, b):
    """Integrate ``d[Z B(x)] = Z([X_i, B] o dw_i + [V, B] dt)`` along the path.

    Returns ``(integrated, direct)``, both of shape ``(m+1, P, D)``, where
    ``direct[k] = Z_k B(x_k)``.
    """
    if path.Z is None:
        raise SimulationError("inverse flow not computed")
    dw, dt = path.dw, path.grid.dt
    m = dw.shape[0]
    direct = matvec(path.Z, b(path.x))

    def forcing(k, j):
        xk = path.x[k]
        out = sum(lie_bracket(xi, b, xk) * dw[j][..., i:i + 1] for i, xi in enumerate(model.frame))
        if model.drift is not None:
            out = out + lie_bracket(model.drift, b, xk) * dt
        return matvec(path.Z[k], out)

    q = np.empty_like(direct)
    q[0] = direct[0]
    prev = forcing(0, 0) if m else None
    for k in range(m):
        nxt = forcing(k + 1, k)
        q[k + 1] = q[k] + 0.5 * (prev + nxt)
        if k + 1 < m:
            prev = forcing(k + 1, k + 1)
    return q, direct


def _mgs(frame, gram=None):
    """Modified Gram-Schmidt on the columns of ``frame`` (batched).

    ``gram`` is an optional metric ``g`` so that ``<u, v> = u^T g v``.
    """
    f = frame.copy()
    ip = (lambda u, v: np.sum(u * v, axis=-1)) if gram is None else \
        (lambda u, v: np.einsum("...a,...ab,...b->...", u, gram, v))
    for j in range(f.shape[-1]):
        col = f[..., :, j]
        for i in range(j):
            qi = f[..., :, i]
            col = col - ip(qi, col)[..., None] * qi
        col = col / np.sqrt(ip(col, col))[..., None]
        f[..., :, j] = col
    return f


def _initial_frames(model, batch_shape):
    o = model.origin
    D = model.coord_dim
    if model.embedding is None:
        g = lower_metric(model, o)
        f0 = _mgs(np.eye(D), g)
        return np.broadcast_to(f0, batch_shape + (D, D)).copy(), None
    p = model.embedding.projection(o)
    u, s, _ = np.linalg.svd(p)
    tang = u[:, : model.dim]
    norm = u[:, model.dim:]
    return (np.broadcast_to(tang, batch_shape + tang.shape).copy(),
            np.broadcast_to(norm, batch_shape + norm.shape).copy())


def parallel_transport(model, path, x=None):
    """Fill ``path.U`` with stochastic parallel translation along the path.

    Each step transports a frame with the connection's linear equation
    (Heun on the state increment), re-projects onto the tangent space and
    re-orthonormalises by modified Gram-Schmidt.  Embedded models store the
    ``D x D`` orthogonal matrix ``F_k F_0^T + N_k N_0^T`` (normal frame ``N``
    carried by projection), so ``U_0 = I`` and ``U^{-1} = U^T``; chart models
    store ``F_k F_0^{-1}`` with ``F`` orthonormal for the metric.

    ``x`` may be given instead of a simulated path, with shape ``(m+1, P, D)``.
    """
    xs = path.x if x is None else np.asarray(x, dtype=float)
    m, P = xs.shape[0] - 1, xs.shape[1]
    F, N = _initial_frames(model, (P,))
    F0, N0 = F.copy(), None if N is None else N.copy()
    D = model.coord_dim
    U = np.empty((m + 1, P, D, D))
    if model.embedding is not None:
        emb = model.embedding
        U[0] = F0 @ np.swapaxes(F0, -1, -2) + N0 @ np.swapaxes(N0, -1, -2)
        for k in range(m):
            dx = xs[k + 1] - xs[k]
            a = emb.dP(xs[k], dx, model.h_fd) @ F
            fs = F + a
            Fn = F + 0.5 * (a + emb.dP(xs[k + 1], dx, model.h_fd) @ fs)
            p1 = emb.projection(xs[k + 1])
            F = _mgs(p1 @ Fn)
            if N.shape[-1]:
                N = _mgs((np.eye(D) - p1) @ N)
            U[k + 1] = F @ np.swapaxes(F0, -1, -2) + N @ np.swapaxes(N0, -1, -2)
    else:
        f0inv = np.linalg.inv(F0)
        U[0] = np.eye(D)
        gam_k = christoffel(model, xs[0])
        for k in range(m):
            dx = xs[k + 1] - xs[k]
            a = -np.einsum("...kab,...a,...bc->...kc", gam_k, dx, F)
            fs = F + a
            gam_n = christoffel(model, xs[k + 1])
            Fn = F + 0.5 * (a - np.einsum("...kab,...a,...bc->...kc", gam_n, dx, fs))
            F = _mgs(Fn, lower_metric(model, xs[k + 1]))
            gam_k = gam_n
            U[k + 1] = F @ f0inv
    if x is None:
        path.U = U
    return U


def transport_inverse(model, U):
    """``U^{-1}`` on tangent vectors: ``U^T`` when embedded, a matrix inverse otherwise."""
    if model.embedding is not None:
        return np.swapaxes(U, -1, -2)
    return np.linalg.inv(U)


class StochasticIntegral(NamedTuple):
    stratonovich: np.ndarray
    ito: np.ndarray
    correction: np.ndarray


def stratonovich_to_ito(f, dw):
    """Split the midpoint sum ``sum 1/2 (f_k + f_{k+1}) . dw_k``.

    ``f`` has shape ``(m+1, ..., n)``, ``dw`` shape ``(m, ..., n)``; the last
    axis is contracted.  Returns the Stratonovich value, the left-point Itô sum
    and the correction ``1/2 sum (f_{k+1} - f_k) . dw_k``.
    """
    f = np.asarray(f, dtype=float)
    dw = np.asarray(dw, dtype=float)
    if f.shape[0] != dw.shape[0] + 1:
        raise DimensionError(f"integrand has {f.shape[0]} nodes, increments {dw.shape[0]}")
    ito = np.sum(f[:-1] * dw, axis=(0, -1))
    corr = 0.5 * np.sum((f[1:] - f[:-1]) * dw, axis=(0, -1))
    return StochasticIntegral(ito + corr, ito, corr)


def drift_coefficients(model, x):
    """``u = X(x)^* V(x)``; raises if ``V`` leaves ``E``."""
    v = model.drift_vector(x)
    res = model.bundle_residual(x, v)
    if np.any(res > BUNDLE_TOL):
        raise NotInBundleError(f"{model.name}: drift leaves span{{X_i}} (residual {np.nanmax(res):.2e})")
    return matvec(model.adjoint_matrix(x), v)


def girsanov_log_weight(model, path):
    """``log G = sum u(x_k) . dw_k - 1/2 sum |u(x_k)|^2 dt`` on a driftless path."""
    if model.drift is None:
        return np.zeros(path.paths)
    u = drift_coefficients(model, path.x[:-1])
    return np.sum(u * path.dw, axis=(0, -1)) - 0.5 * path.grid.dt * np.sum(u * u, axis=(0, -1))


def girsanov_weight(model, path):
    """Density removing the drift of ``model`` from a path simulated without it.

    ``E[Phi(g~(w)) G(w)] = E[Phi(x)]`` where ``x`` solves the drifted equation.
    """
    return np.exp(girsanov_log_weight(model, path))


def girsanov_log_derivative(model, path, eta, dr):
    """Directional derivative of ``log G`` when ``w`` moves along ``dr``.

    ``eta`` (``(m+1, P, D)``) is the induced motion of ``x`` and ``dr``
    (``(m, P, n)``) the increments of the Wiener tangent.
    """
    if model.drift is None:
        return np.zeros(path.paths)
    x = path.x[:-1]
    u = drift_coefficients(model, x)
    h = model.h_fd
    e = eta[:-1]
    du = (drift_coefficients(model, x + h * e) - drift_coefficients(model, x - h * e)) / (2 * h)
    dt = path.grid.dt
    return (np.sum(du * path.dw, axis=(0, -1)) + np.sum(u * dr, axis=(0, -1))
            - dt * np.sum(u * du, axis=(0, -1)))
