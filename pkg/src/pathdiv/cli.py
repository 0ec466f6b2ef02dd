"""Command-line entry point.

Every numeric flag can also be set from the environment with the ``PATHDIV_``
prefix (``PATHDIV_SCENARIO``, ``PATHDIV_PATHS``, ``PATHDIV_DT``,
``PATHDIV_SEED``, ``PATHDIV_WORKERS``, ``PATHDIV_REPORT``, ``PATHDIV_FORMAT``,
``PATHDIV_POINTS``).  Explicit flags win over the environment.

Exit codes: 0 all gates pass, 1 a gate failed, 2 configuration error,
3 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__, scenarios, verify
from .errors import ConfigError
from .geometry import check_invariants

ENV_PREFIX = "PATHDIV_"
EXIT_OK, EXIT_GATE, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3

_ENV_FLAGS = {
    "scenario": str, "paths": int, "dt": float, "seed": int, "workers": int,
    "report": str, "format": str, "points": int,
}


@dataclass
class RunReport:
    """Outcome of one scenario run; everything except ``wall_time`` is reproducible."""

    scenario: dict
    grid: dict
    seed: int
    version: str
    oracles: list = field(default_factory=list)
    tests: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def passed(self):
        return all(o["passed"] for o in self.oracles) and all(t["passed"] for t in self.tests)

    def records(self):
        """Line-delimited records: a run header, then one record per check."""
        head = {"kind": "run", "version": self.version, "seed": self.seed, "grid": self.grid,
                "scenario": self.scenario, "wall_time": self.wall_time, "passed": self.passed}
        out = [head]
        out += [{"kind": "lift_oracle", **o} for o in self.oracles]
        out += [{"kind": "ibp", **t} for t in self.tests]
        return out

    def table(self):
        s = self.scenario
        lines = [f"pathdiv {self.version}  scenario={s.get('name') or s['model_name']}  "
                 f"model={s['model_name']}  constructor={s['constructor']}  "
                 f"n={s['n_paths']}  dt={self.grid['dt']}  T={self.grid['T']}  seed={self.seed}"]
        if self.oracles:
            lines.append(f"{'lift oracle':<40} {'rel.err':>10} {'tol':>8}  verdict")
            for o in self.oracles:
                lines.append(f"{o['name']:<40} {o['rel_error']:>10.3e} {o['tolerance']:>8.3g}  "
                             f"{'pass' if o['passed'] else 'FAIL'}")
        lines.append(f"{'ibp test':<40} {'E[eta Phi]':>12} {'E[Phi Div]':>12} {'z':>7}  verdict")
        for t in self.tests:
            lines.append(f"{t['name']:<40} {t['lhs']['mean']:>12.5g} {t['rhs']['mean']:>12.5g} "
                         f"{t['z']:>7.3f}  {t['verdict']}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}  ({self.wall_time:.1f} s)")
        return "\n".join(lines)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def dumps(record):
    return json.dumps(record, default=_jsonable, sort_keys=True)


def resolve_scenario(ref):
    """A catalogue name or a path to a config file."""
    if ref in scenarios.CATALOG:
        return scenarios.get(ref)
    if os.path.exists(ref):
        spec = scenarios.load_file(ref)
        return spec.with_(name=spec.name or os.path.splitext(os.path.basename(ref))[0])
    raise ConfigError([f"--scenario: {ref!r} is neither a built-in scenario "
                       f"({', '.join(sorted(scenarios.CATALOG))}) nor a readable file"])


def apply_overrides(spec, paths=None, dt=None, seed=None, workers=None):
    kw = {k: v for k, v in (("n_paths", paths), ("dt", dt), ("seed", seed), ("workers", workers))
          if v is not None}
    spec = spec.with_(**kw)
    problems = scenarios.validate(spec)
    if problems:
        raise ConfigError(problems)
    return spec


def run(spec, workers=None, with_oracle=True):
    """Lift oracle (when requested) plus the paired IBP battery."""
    t0 = time.perf_counter()
    workers = spec.workers if workers is None else workers
    oracles = [o.record() for o in verify.lift_oracle_for(spec)] if with_oracle else []
    tests = [r.record() for r in verify.ibp_test(spec, workers)]
    grid = spec.grid
    return RunReport(
        scenario=spec.echo(), grid={"T": grid.T, "dt": grid.dt, "steps": grid.steps},
        seed=spec.seed, version=__version__, oracles=oracles, tests=tests,
        wall_time=time.perf_counter() - t0,
    )


def list_scenarios():
    rows = []
    for name in sorted(scenarios.CATALOG):
        s = scenarios.CATALOG[name]
        rows.append(f"{name:<18} model={s.model_name:<16} constructor={s.constructor:<9} n={s.n_paths}")
    rows.append("")
    rows.append("models:")
    for name, desc in scenarios.DESCRIPTIONS.items():
        rows.append(f"  {name:<16} {desc}")
    return "\n".join(rows)


def check_geometry(model_name, n_points=100, seed=42):
    if model_name not in scenarios.BUILTINS:
        raise ConfigError([f"--check-geometry: unknown model {model_name!r} "
                           f"(known: {', '.join(scenarios.BUILTINS)})"])
    return check_invariants(scenarios.builtin(model_name), n_points=n_points, seed=seed)


def _env_defaults(environ):
    out = {}
    for key, conv in _ENV_FLAGS.items():
        raw = environ.get(ENV_PREFIX + key.upper())
        if raw is None or raw == "":
            continue
        try:
            out[key] = conv(raw)
        except ValueError:
            raise ConfigError([f"{ENV_PREFIX}{key.upper()}: cannot parse {raw!r}"]) from None
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="pathdiv", description="Path-space integration-by-parts checks.")
    p.add_argument("--scenario", help="built-in scenario name or config file path")
    p.add_argument("--paths", type=int, help="Monte Carlo paths")
    p.add_argument("--dt", type=float, help="time step")
    p.add_argument("--seed", type=int, help="64-bit seed")
    p.add_argument("--workers", type=int, help="worker processes (results do not depend on it)")
    p.add_argument("--report", help="write line-delimited JSON records here")
    p.add_argument("--format", choices=("table", "records"), help="standard output format (default table)")
    p.add_argument("--list", action="store_true", help="list built-in scenarios and models")
    p.add_argument("--check-geometry", metavar="MODEL", help="run the invariant suite on a built-in model")
    p.add_argument("--points", type=int, help="random points for --check-geometry (default 100)")
    p.add_argument("--no-oracle", action="store_true", help="skip the lift oracle")
    return p


def _emit(records, text, fmt, report, out):
    if report:
        with open(report, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(dumps(r) + "\n")
    if fmt == "records":
        for r in records:
            out.write(dumps(r) + "\n")
    else:
        out.write(text + "\n")


def main(argv=None, environ=None, out=None):
    out = out or sys.stdout
    environ = os.environ if environ is None else environ
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = _env_defaults(environ)
        opts.update({k: v for k, v in vars(args).items() if v is not None and k in _ENV_FLAGS})
        fmt = opts.get("format", "table")
        if fmt not in ("table", "records"):
            raise ConfigError([f"format: expected table or records, got {fmt!r}"])
        if args.list:
            out.write(list_scenarios() + "\n")
            return EXIT_OK
        if args.check_geometry:
            rows = check_geometry(args.check_geometry, opts.get("points", 100), opts.get("seed", 42))
            records = [{"kind": "invariant", "model": args.check_geometry, **r.__dict__} for r in rows]
            width = max(len(r.name) for r in rows)
            text = "\n".join(f"{r.name:<{width}}  {r.residual:.3e}  <= {r.tolerance:.1e}  "
                             f"{'pass' if r.passed else 'FAIL'}" for r in rows)
            _emit(records, text, fmt, opts.get("report"), out)
            return EXIT_OK if all(r.passed for r in rows) else EXIT_GATE
        if "scenario" not in opts:
            raise ConfigError(["--scenario is required (or use --list / --check-geometry)"])
        spec = apply_overrides(resolve_scenario(opts["scenario"]), opts.get("paths"), opts.get("dt"),
                               opts.get("seed"), opts.get("workers"))
        report = run(spec, with_oracle=not args.no_oracle)
        _emit(report.records(), report.table(), fmt, opts.get("report"), out)
        return EXIT_OK if report.passed else EXIT_GATE
    except ConfigError as exc:
        for msg in exc.problems:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the exit code contract covers everything else
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
