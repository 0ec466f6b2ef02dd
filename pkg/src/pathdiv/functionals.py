"""Cylindrical test functionals and the standard battery."""

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError


@dataclass
class CylindricalFunctional:
    """``Phi(x) = f(x_{t_1}, ..., x_{t_k})`` with gradient oracle.

    ``f(states)`` and ``grad(states)`` take a list of ``(P, D)`` arrays; ``grad``
    returns one ``(P, D)`` array per sample time.
    """

    name: str
    times: tuple
    f: Callable
    grad: Callable

    def __post_init__(self):
        self.times = tuple(float(t) for t in self.times)
        if list(self.times) != sorted(self.times) or self.times[0] <= 0.0:
            raise ValueError(f"{self.name}: sample times must be sorted and positive")

    def indices(self, grid):
        out = []
        for t in self.times:
            if t > grid.T * (1 + 1e-12):
                raise DimensionError(f"{self.name}: sample time {t} beyond horizon {grid.T}")
            k, exact = grid.index(t)
            if not exact:
                warnings.warn(f"{self.name}: time {t} is off the grid, using t={k * grid.dt}", stacklevel=3)
            out.append(k)
        return out

    def states(self, x, grid):
        return [x[k] for k in self.indices(grid)]

    def __call__(self, x, grid):
        return self.f(self.states(x, grid))


def directional_derivative(phi, path_or_x, eta, grid=None):
    """Chain rule ``sum_j grad_j f(x_{t_1}, ...) . eta_{t_j}``."""
    x = getattr(path_or_x, "x", path_or_x)
    grid = grid or path_or_x.grid
    e = getattr(eta, "eta", eta)
    idx = phi.indices(grid)
    grads = phi.grad([x[k] for k in idx])
    return sum(np.sum(g * e[k], axis=-1) for g, k in zip(grads, idx))


def _linear_combo(times, dim):
    """``l(x) = sum_c x_{t_c}[c mod D]`` and its (constant) gradient."""
    def ell(states):
        return sum(s[..., c % dim] for c, s in enumerate(states))

    def dell(states):
        out = []
        for c, s in enumerate(states):
            g = np.zeros_like(s)
            g[..., c % dim] = 1.0
            out.append(g)
        return out

    return ell, dell


OUTER = {
    "x": (lambda l: l, lambda l: np.ones_like(l)),
    "x2": (lambda l: l * l, lambda l: 2.0 * l),
    "sinx": (np.sin, np.cos),
}


def make_functional(name, T, dim):
    """Named functional on paths in ``R^D``.

    ``x``, ``x2``, ``sinx`` apply ``l, l^2, sin l`` to ``l = sum_c x_{tau_c}[c]``
    with ``tau = (T, T/2, T/4)``; ``prod`` is ``x_T[0] x_{T/2}[D-1]`` and
    ``gauss`` is ``exp(-|x_T|^2 / 2)``.
    """
    if name in OUTER:
        # tau_0 = T pairs with coordinate 0
        times_desc = [T, T / 2, T / 4][: max(1, min(3, dim))]
        ell, dell = _linear_combo(times_desc, dim)
        outer, douter = OUTER[name]
        order = np.argsort(times_desc)
        times = tuple(times_desc[i] for i in order)
        inv = np.argsort(order)

        def f(states):
            desc = [states[inv[i]] for i in range(len(times))]
            return outer(ell(desc))

        def grad(states):
            desc = [states[inv[i]] for i in range(len(times))]
            l = ell(desc)
            gd = dell(desc)
            s = douter(l)[..., None]
            return [s * gd[inv[j]] for j in range(len(times))]

        return CylindricalFunctional(name, times, f, grad)
    if name == "prod":
        t = tuple(sorted({T / 2, T}))

        def f(states):
            return states[-1][..., 0] * states[0][..., dim - 1]

        def grad(states):
            a, b = states[0], states[-1]
            ga, gb = np.zeros_like(a), np.zeros_like(b)
            ga[..., dim - 1] = b[..., 0]
            gb[..., 0] = a[..., dim - 1]
            return [ga, gb]

        return CylindricalFunctional(name, t, f, grad)
    if name == "gauss":
        def f(states):
            return np.exp(-0.5 * np.sum(states[0] ** 2, axis=-1))

        def grad(states):
            return [-states[0] * f(states)[..., None]]

        return CylindricalFunctional(name, (T,), f, grad)
    raise ValueError(f"unknown functional {name!r}; known: x, x2, sinx, prod, gauss")


def battery(names, T, dim):
    return [make_functional(n, T, dim) for n in names]
