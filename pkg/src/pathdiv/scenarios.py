"""Scenario specifications: model, constructor, driving path, harness and gates.

Configuration is INI text with the sections ``[model]``, ``[constructor]``,
``[driving]``, ``[harness]`` and ``[gates]``.  Every key is typed and has a
default; unknown sections or keys are errors.  :func:`load` reports every
problem at once.

Schema (key: type, default, meaning)::

    [model]
    name          str    (required)   flat | heisenberg | sphere_gradient | drifted_flat | degenerate_demo
    dim           int    1 (flat), 2 (drifted_flat)   Euclidean dimension
    drift         float  0.5          drifted_flat: V = drift * X_1
    origin        floats model default   base point o, space separated

    [constructor]
    name          str    thm31        thm31 | thm32 | thm34 | thm42 | gradient | driver | ricci | rotation
    swap_inner    bool   false        use <.,.> where (.,.) appears in the h-systems

    [driving]
    kind          str    default      default | piecewise_linear | polynomial | rotation
    knots         floats              piecewise_linear: times, starting at 0
    values        rows                piecewise_linear: one row per knot, rows separated by ';'
    coeffs        rows                polynomial: rdot(t) = sum_j coeffs[j] t^j
    matrix        rows                rotation: skew n x n generator

    [harness]
    T             float  1.0          horizon (time units)
    dt            float  1e-3         step size (time units)
    n_paths       int    200000       Monte Carlo paths
    seed          int    0            64-bit seed
    batch_size    int    2000         paths per batch (fixes the reduction order)
    battery       names  x x2 sinx    cylindrical functionals
    workers       int    1            worker processes (never changes results)

    [gates]
    z             float  3.0          paired z threshold
    exclusion     float  0.001        admissible fraction of non-finite paths
    lift_tol      float  0.05         lift-oracle relative error gate
    lift_eps      float  1e-4         lift-oracle perturbation size
    lift_paths    int    100          lift-oracle paths
"""

from __future__ import annotations

import configparser
import inspect
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import models
from .models import BUILTINS, DESCRIPTIONS, builtin  # noqa: F401
from .errors import ConfigError, PathDivError
from .functionals import OUTER, battery
from .pathspace import CONSTRUCTORS, CameronMartinPath, construct
from .sde import TimeGrid

MODEL_NAMES = tuple(models.BUILTINS)
CONSTRUCTOR_NAMES = tuple(CONSTRUCTORS)
FUNCTIONAL_NAMES = tuple(OUTER) + ("prod", "gauss")
DRIVING_KINDS = ("default", "piecewise_linear", "polynomial", "rotation")

REQUIRES_GRADIENT = ("driver", "gradient")
REQUIRES_INDEPENDENT = ("thm42",)
REQUIRES_RIEMANNIAN = ("thm34",)


@dataclass(frozen=True)
class ScenarioSpec:
    model_name: str
    constructor: str = "thm31"
    T: float = 1.0
    dt: float = 1e-3
    n_paths: int = 200_000
    seed: int = 0
    batch_size: int = 2000
    workers: int = 1
    driving_kind: str = "default"
    knots: Optional[tuple] = None
    values: Optional[tuple] = None
    coeffs: Optional[tuple] = None
    matrix: Optional[tuple] = None
    phi_battery: tuple = ("x", "x2", "sinx")
    z: float = 3.0
    exclusion: float = 1e-3
    lift_tol: float = 0.05
    lift_eps: float = 1e-4
    lift_paths: int = 100
    model_params: tuple = ()
    swap_inner: bool = False
    name: str = ""

    @property
    def grid(self):
        return TimeGrid.from_dt(self.T, self.dt)

    def model(self):
        return models.builtin(self.model_name, **dict(self.model_params))

    def with_(self, **kw):
        return replace(self, **kw)

    def functionals(self, dim=None):
        dim = dim or self.model().coord_dim
        return battery(self.phi_battery, self.T, dim)

    def driving(self, model=None):
        """The driving object handed to the constructor."""
        model = model or self.model()
        n = model.noise_dim
        kind = self.driving_kind
        if kind == "default":
            return default_driving(self.constructor, model, self.T)
        if kind == "piecewise_linear":
            dim = model.coord_dim if self.constructor == "driver" else n
            return CameronMartinPath(dim, np.array(self.knots), np.array(self.values))
        if kind == "polynomial":
            dim = model.coord_dim if self.constructor == "driver" else n
            return CameronMartinPath(dim, coeffs=np.array(self.coeffs))
        return np.array(self.matrix)

    def construct(self, model, path):
        kw = {}
        if self.swap_inner and self.constructor in ("thm31", "thm32", "ricci"):
            kw["swap_inner"] = True
        return construct(self.constructor, model, path, self.driving(model), **kw)

    def echo(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["model_params"] = dict(self.model_params)
        return out


def default_driving(constructor, model, T):
    """Piecewise-linear path through fixed knots; tangent at ``o`` for the driver."""
    if constructor == "rotation":
        n = model.noise_dim
        a = np.zeros((n, n))
        if n >= 2:
            a[0, 1], a[1, 0] = 1.0, -1.0
        if n >= 3:
            a[1, 2], a[2, 1] = 0.5, -0.5
        return a
    dim = model.coord_dim if constructor == "driver" else model.noise_dim
    base_mid = np.array([0.6, -0.4, 0.3, 0.2])
    base_end = np.array([0.2, 0.5, -0.3, 0.1])
    mid = np.resize(base_mid, dim)
    end = np.resize(base_end, dim)
    if constructor == "driver":
        p = model.tangent_projector(model.origin)
        mid, end = p @ mid, p @ end
    return CameronMartinPath(dim, np.array([0.0, T / 2, T]), np.vstack([np.zeros(dim), mid, end]))


# --- config ingestion ----------------------------------------------------

def _floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def _rows(text):
    return tuple(_floats(r) for r in text.split(";") if r.strip())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SCHEMA = {
    "model": {"name": str, "dim": int, "drift": float, "origin": _floats},
    "constructor": {"name": str, "swap_inner": _bool},
    "driving": {"kind": str, "knots": _floats, "values": _rows, "coeffs": _rows, "matrix": _rows},
    "harness": {"T": float, "dt": float, "n_paths": int, "seed": int, "batch_size": int,
                "battery": lambda s: tuple(s.replace(",", " ").split()), "workers": int},
    "gates": {"z": float, "exclusion": float, "lift_tol": float, "lift_eps": float, "lift_paths": int},
}


def _parse(text):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    problems = []
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            problems.append(f"unknown section [{sec}]")
            continue
        for key, raw in cp.items(sec):
            conv = SCHEMA[sec].get(key)
            if conv is None:
                problems.append(f"unknown key {sec}.{key}")
                continue
            try:
                values[f"{sec}.{key}"] = conv(raw)
            except (ValueError, TypeError) as exc:
                problems.append(f"{sec}.{key}: cannot parse {raw!r} ({exc})")
    return values, problems


def validate(spec):
    """Every violated constraint of ``spec`` as a list of messages."""
    problems = []
    if spec.model_name not in MODEL_NAMES:
        problems.append(f"model.name: unknown model {spec.model_name!r} (known: {', '.join(MODEL_NAMES)})")
    if spec.constructor not in CONSTRUCTOR_NAMES:
        problems.append(f"constructor.name: unknown constructor {spec.constructor!r} "
                        f"(known: {', '.join(CONSTRUCTOR_NAMES)})")
    if not spec.T > 0:
        problems.append(f"harness.T: must be positive, got {spec.T}")
    if not spec.dt > 0:
        problems.append(f"harness.dt: must be positive, got {spec.dt}")
    elif spec.T > 0:
        steps = spec.T / spec.dt
        if abs(steps - round(steps)) > 1e-9 * steps:
            problems.append(f"harness.dt: T={spec.T} is not an integer multiple of dt={spec.dt}")
    if spec.n_paths < 1:
        problems.append(f"harness.n_paths: must be at least 1, got {spec.n_paths}")
    if spec.batch_size < 1:
        problems.append(f"harness.batch_size: must be at least 1, got {spec.batch_size}")
    if spec.workers < 1:
        problems.append(f"harness.workers: must be at least 1, got {spec.workers}")
    if not 0 <= spec.seed < 2**64:
        problems.append(f"harness.seed: must be a 64-bit unsigned integer, got {spec.seed}")
    for b in spec.phi_battery:
        if b not in FUNCTIONAL_NAMES:
            problems.append(f"harness.battery: unknown functional {b!r} (known: {', '.join(FUNCTIONAL_NAMES)})")
    if not spec.phi_battery:
        problems.append("harness.battery: empty")
    if not spec.z > 0:
        problems.append(f"gates.z: must be positive, got {spec.z}")
    if not 0 <= spec.exclusion < 1:
        problems.append(f"gates.exclusion: must lie in [0, 1), got {spec.exclusion}")
    if not spec.lift_eps > 0:
        problems.append(f"gates.lift_eps: must be positive, got {spec.lift_eps}")
    if spec.lift_paths < 1:
        problems.append(f"gates.lift_paths: must be at least 1, got {spec.lift_paths}")
    if spec.driving_kind not in DRIVING_KINDS:
        problems.append(f"driving.kind: unknown kind {spec.driving_kind!r}")
    if problems:
        return problems

    try:
        model = spec.model()
    except (PathDivError, TypeError, ValueError) as exc:
        return [f"model: {exc}"]
    c = spec.constructor
    if c in REQUIRES_GRADIENT and model.mode != "gradient_system":
        problems.append(f"constructor.name: {c} requires gradient_system mode ({spec.model_name} is {model.mode})")
    if c in REQUIRES_INDEPENDENT and model.mode != "linearly_independent":
        problems.append(f"constructor.name: {c} requires linearly_independent mode ({spec.model_name} is {model.mode})")
    if c in REQUIRES_RIEMANNIAN and model.rank_E != model.dim:
        problems.append(f"constructor.name: {c} requires E = TM (elliptic diffusion); {spec.model_name} is degenerate")
    if c == "rotation" and spec.driving_kind not in ("default", "rotation"):
        problems.append("driving.kind: rotation constructor takes a skew matrix")
    if c != "rotation" and spec.driving_kind == "rotation":
        problems.append(f"driving.kind: rotation generator only applies to the rotation constructor, not {c}")

    n = model.noise_dim
    want = model.coord_dim if c == "driver" else n
    if spec.driving_kind == "piecewise_linear":
        if spec.knots is None or spec.values is None:
            problems.append("driving: piecewise_linear needs knots and values")
        else:
            kn = np.array(spec.knots)
            if len(kn) < 2 or kn[0] != 0.0 or np.any(np.diff(kn) <= 0):
                problems.append("driving.knots: must start at 0 and increase strictly")
            if np.any(kn > spec.T * (1 + 1e-12)) or np.any(kn < 0):
                problems.append(f"driving.knots: times must lie in [0, T={spec.T}]")
            if len(spec.values) != len(kn):
                problems.append(f"driving.values: {len(spec.values)} rows for {len(kn)} knots")
            if any(len(r) != want for r in spec.values):
                problems.append(f"driving.values: rows must have {want} entries")
            elif spec.values and any(v != 0.0 for v in spec.values[0]):
                problems.append("driving.values: a Cameron-Martin path starts at 0")
    if spec.driving_kind == "polynomial":
        if not spec.coeffs:
            problems.append("driving: polynomial needs coeffs")
        elif any(len(r) != want for r in spec.coeffs):
            problems.append(f"driving.coeffs: rows must have {want} entries")
    if spec.driving_kind == "rotation":
        a = np.array(spec.matrix) if spec.matrix else None
        if a is None or a.shape != (n, n):
            problems.append(f"driving.matrix: must be {n} x {n}")
        elif np.any(a + a.T != 0):
            problems.append("driving.matrix: must be skew-symmetric")
    if c == "driver" and spec.driving_kind in ("piecewise_linear", "polynomial") and not problems:
        p = model.tangent_projector(model.origin)
        rows = np.array(spec.values if spec.driving_kind == "piecewise_linear" else spec.coeffs)
        if np.max(np.abs(rows @ p.T - rows)) > 1e-10:
            problems.append("driving: driver path must lie in the tangent space at the base point")
    return problems


def load(text):
    """Parse and validate config text; raises :class:`ConfigError` listing every problem."""
    values, problems = _parse(text)
    get = values.get
    name = get("model.name")
    if name is None:
        problems.append("model.name: required")
    params = {}
    if "model.dim" in values:
        params["dim"] = values["model.dim"]
    if "model.drift" in values:
        params["c"] = values["model.drift"]
    if "model.origin" in values:
        params["origin"] = np.array(values["model.origin"])
    if name in models.BUILTINS:
        accepted = inspect.signature(models.BUILTINS[name]).parameters
        for key, cfg in (("dim", "model.dim"), ("c", "model.drift")):
            if key in params and key not in accepted:
                problems.append(f"{cfg}: not a parameter of model {name}")
                params.pop(key)
        if "dim" in params and params["dim"] < 1:
            problems.append(f"model.dim: must be at least 1, got {params['dim']}")
    kind = get("driving.kind", "default")
    spec = ScenarioSpec(
        model_name=name or "",
        constructor=get("constructor.name", "thm31"),
        T=get("harness.T", 1.0),
        dt=get("harness.dt", 1e-3),
        n_paths=get("harness.n_paths", 200_000),
        seed=get("harness.seed", 0),
        batch_size=get("harness.batch_size", 2000),
        workers=get("harness.workers", 1),
        driving_kind=kind,
        knots=get("driving.knots"),
        values=get("driving.values"),
        coeffs=get("driving.coeffs"),
        matrix=get("driving.matrix"),
        phi_battery=get("harness.battery", ("x", "x2", "sinx")),
        z=get("gates.z", 3.0),
        exclusion=get("gates.exclusion", 1e-3),
        lift_tol=get("gates.lift_tol", 0.05),
        lift_eps=get("gates.lift_eps", 1e-4),
        lift_paths=get("gates.lift_paths", 100),
        model_params=tuple(sorted(params.items(), key=lambda kv: kv[0])),
        swap_inner=get("constructor.swap_inner", False),
    )
    if "model.origin" in values and name in models.BUILTINS and not problems:
        try:
            spec.model()
        except PathDivError as exc:
            problems.append(f"model.origin: {exc}")
    if name is not None:
        problems += validate(spec)
    if problems:
        raise ConfigError(problems)
    return spec


def load_file(path):
    with open(path, encoding="utf-8") as fh:
        return load(fh.read())


# --- built-in scenario catalogue -----------------------------------------

CATALOG = {
    # h = rdot = 1, so eta_t = t and the "x" functional has E[eta Phi] = T
    "flat": ScenarioSpec("flat", "thm31", phi_battery=("x", "x2", "sinx"), n_paths=100_000,
                         driving_kind="polynomial", coeffs=((1.0,),), name="flat", batch_size=10_000),
    "flat_rotation": ScenarioSpec("flat", "rotation", model_params=(("dim", 2),), n_paths=100_000,
                                  name="flat_rotation", batch_size=10_000),
    "heisenberg": ScenarioSpec("heisenberg", "thm42", name="heisenberg", batch_size=4000),
    "heisenberg_thm31": ScenarioSpec("heisenberg", "thm31", name="heisenberg_thm31", batch_size=2000),
    "sphere_driver": ScenarioSpec("sphere_gradient", "driver", name="sphere_driver", batch_size=4000),
    "sphere_thm31": ScenarioSpec("sphere_gradient", "thm31", n_paths=20_000, name="sphere_thm31", batch_size=1000),
    "sphere_ricci": ScenarioSpec("sphere_gradient", "ricci", n_paths=5_000, name="sphere_ricci", batch_size=500),
    "drifted_flat": ScenarioSpec("drifted_flat", "thm31", model_params=(("c", 0.5), ("dim", 2)),
                                 n_paths=100_000, name="drifted_flat", batch_size=10_000),
}


def get(name):
    """Catalogue entry by name."""
    try:
        return CATALOG[name]
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r} (known: {', '.join(sorted(CATALOG))})") from None
