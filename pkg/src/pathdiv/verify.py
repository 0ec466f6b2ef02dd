"""Monte Carlo integration-by-parts harness and finite-difference oracles.

The ensemble is cut into fixed batches of consecutive stream ids.  Each batch
produces an :class:`~pathdiv.stats.EstimatorState`; states are merged in batch
order, so the result does not depend on how many workers ran the batches.
"""

from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .functionals import directional_derivative
from .sde import (NoisePath, derivative_flow, girsanov_log_derivative,
                  girsanov_log_weight, inverse_flow, simulate)
from .stats import EstimatorState, MCReport, paired_report

_CTX = {}
CHUNK = 1000


@dataclass
class Problem:
    """Everything a worker needs: the scenario plus derived objects."""

    spec: object
    model: object = None
    sim_model: object = None
    grid: object = None
    phis: list = field(default_factory=list)

    @classmethod
    def from_spec(cls, spec):
        model = spec.model()
        sim = model.without_drift() if model.drift is not None else model
        grid = spec.grid
        return cls(spec, model, sim, grid, spec.functionals(model.coord_dim))


def simulate_batch(problem, stream_ids, flow=False):
    noise = NoisePath.generate(problem.grid, problem.sim_model.noise_dim, problem.spec.seed, stream_ids)
    path = simulate(problem.sim_model, problem.grid, noise, strict=False)
    if flow:
        derivative_flow(problem.sim_model, path)
        inverse_flow(path)
    return path


def _chunk_samples(problem, stream_ids):
    """Per-path ``(L_1, R_1, L_2, R_2, ...)`` for a set of paths, plus the finite mask.

    Without drift ``L = eta Phi`` and ``R = Phi Div``.  With a drift the paths
    come from the driftless equation and the Girsanov weight ``G`` enters:
    ``L = G eta Phi`` and ``R = Phi (G Div - r(G))``.
    """
    path = simulate_batch(problem, stream_ids)
    with np.errstate(all="ignore"):
        con = problem.spec.construct(problem.sim_model, path)
        div = con.div.value
        weight = None
        if problem.model.drift is not None:
            logg = girsanov_log_weight(problem.model, path)
            weight = np.exp(logg)
            dr = con.lift.increments(path.dw, path.grid.dt, "ito")
            dlog = girsanov_log_derivative(problem.model, path, con.eta.eta, dr)
        cols = []
        for phi in problem.phis:
            val = phi(path.x, path.grid)
            lhs = directional_derivative(phi, path, con.eta)
            rhs = val * div
            if weight is not None:
                lhs = weight * lhs
                rhs = weight * val * (div - dlog)
            cols += [lhs, rhs]
        out = np.stack(cols, axis=-1)
    finite = path.finite & np.all(np.isfinite(out), axis=-1)
    return out, finite


def batch_samples(problem, stream_ids):
    """:func:`_chunk_samples` over a batch, ``CHUNK`` paths at a time.

    Per-path values do not depend on the chunking; the chunk only bounds the
    memory of a worker (about 250 MB for a 1000-path Heisenberg chunk).
    """
    ids = list(stream_ids)
    outs, fins = [], []
    for lo in range(0, len(ids), CHUNK):
        out, fin = _chunk_samples(problem, ids[lo:lo + CHUNK])
        outs.append(out)
        fins.append(fin)
    return np.concatenate(outs), np.concatenate(fins)


def _batches(n_paths, batch_size):
    starts = range(0, n_paths, batch_size)
    return [(s, min(s + batch_size, n_paths)) for s in starts]


def _run_batch(bounds):
    problem = _CTX["problem"]
    lo, hi = bounds
    out, finite = batch_samples(problem, range(lo, hi))
    return EstimatorState.from_samples(out[finite]), int((~finite).sum())


def run_states(problem, workers=1, batch_fn=None):
    """Merged state and exclusion count over the whole ensemble."""
    spec = problem.spec
    bounds = _batches(spec.n_paths, spec.batch_size)
    fn = batch_fn or _run_batch
    _CTX["problem"] = problem
    if workers > 1 and len(bounds) > 1:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
            results = list(ex.map(fn, bounds))
    else:
        results = [fn(b) for b in bounds]
    state = EstimatorState(2 * len(problem.phis))
    excluded = 0
    for st, ex_ in results:
        state = state.merge(st)
        excluded += ex_
    return state, excluded


def ibp_test(scenario, workers=1, problem=None):
    """Paired IBP test of every functional in the scenario's battery.

    Returns one :class:`MCReport` per functional.
    """
    problem = problem or Problem.from_spec(scenario)
    state, excluded = run_states(problem, workers)
    reports = []
    for j, phi in enumerate(problem.phis):
        reports.append(paired_report(
            f"{scenario.name or scenario.model_name}:{scenario.constructor}:{phi.name}",
            state, 2 * j, 2 * j + 1, scenario.z, excluded, scenario.exclusion,
            meta={"functional": phi.name, "constructor": scenario.constructor,
                  "model": scenario.model_name, "n_paths": scenario.n_paths, "seed": scenario.seed},
        ))
    return reports


# --- finite-difference lift oracle -----------------------------------------

def perturbed_increments(dw, lift, dt, eps):
    """``dw^eps = exp(eps A~) dw + eps B dt`` with the midpoint rotation ``A~``."""
    out = dw + eps * lift.B_strat * dt
    if lift.A is not None:
        a = 0.5 * (lift.A[:-1] + lift.A[1:])
        rot = expm(eps * a)
        out = np.einsum("...ij,...j->...i", rot, dw) + eps * lift.B_strat * dt
    return out


@dataclass
class LiftOracleResult:
    name: str
    fd: np.ndarray
    directional: np.ndarray
    rel_error: float
    tolerance: float

    @property
    def passed(self):
        return bool(np.isfinite(self.rel_error) and self.rel_error <= self.tolerance)

    def record(self):
        return {"name": self.name, "rel_error": self.rel_error, "tolerance": self.tolerance,
                "paths": int(self.fd.shape[0]), "passed": self.passed,
                "mean_abs_fd": float(np.mean(np.abs(self.fd)))}


def relative_error(fd, directional):
    """Aggregate relative error ``sum |fd - dir| / sum |fd|`` over paths."""
    den = np.sum(np.abs(fd))
    num = np.sum(np.abs(fd - directional))
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return float(num / den)


def fd_lift_oracle(model, path, phi, lift, eta, eps=1e-4, tolerance=0.05, name="lift"):
    """Central difference of ``Phi o g`` along the lift versus ``eta Phi``.

    Both perturbed driving paths reuse the increments of ``path``.
    """
    grid, dw = path.grid, path.dw
    x0 = path.x[0]
    plus = simulate(model, grid, NoisePath(grid, perturbed_increments(dw, lift, grid.dt, eps)), x0=x0)
    minus = simulate(model, grid, NoisePath(grid, perturbed_increments(dw, lift, grid.dt, -eps)), x0=x0)
    fd = (phi(plus.x, grid) - phi(minus.x, grid)) / (2.0 * eps)
    d = directional_derivative(phi, path, eta)
    return LiftOracleResult(name, fd, d, relative_error(fd, d), tolerance)


def lift_oracle_for(spec, n_paths=None, eps=None, seed_offset=10**12):
    """Run the lift oracle for each functional of ``spec`` on fresh streams."""
    problem = Problem.from_spec(spec)
    n = n_paths or spec.lift_paths
    path = simulate_batch(problem, range(seed_offset, seed_offset + n))
    con = spec.construct(problem.sim_model, path)
    return [fd_lift_oracle(problem.sim_model, path, phi, con.lift, con.eta, eps or spec.lift_eps,
                           spec.lift_tol, f"{spec.name or spec.model_name}:{spec.constructor}:{phi.name}")
            for phi in problem.phis]


def calibration(spec, repetitions=100, workers=1):
    """IBP reruns on independent seeds ``spec.seed, spec.seed + 1, ...``.

    Returns ``(failures, zs)`` where ``zs[rep]`` lists the z of every
    functional and ``failures`` counts individual reports above the gate.
    """
    zs = []
    fails = 0
    for rep in range(repetitions):
        reports = ibp_test(spec.with_(seed=spec.seed + rep), workers)
        zs.append([r.z for r in reports])
        fails += sum(not r.passed for r in reports)
    return fails, zs
