import numpy as np
import pytest

from pathdiv import scenarios
from pathdiv.errors import ConfigError
from pathdiv.pathspace import CameronMartinPath


def problems(text):
    with pytest.raises(ConfigError) as exc:
        scenarios.load(text)
    return exc.value.problems


def test_defaults():
    spec = scenarios.load("[model]\nname = heisenberg\n")
    assert (spec.constructor, spec.T, spec.dt, spec.n_paths, spec.seed) == ("thm31", 1.0, 1e-3, 200_000, 0)
    assert spec.phi_battery == ("x", "x2", "sinx") and spec.z == 3.0
    assert spec.grid.steps == 1000
    drv = spec.driving()
    assert isinstance(drv, CameronMartinPath) and drv.dim == 2


def test_full_config_round_trip():
    spec = scenarios.load("""
[model]
name = drifted_flat
dim = 3
drift = 0.25
[constructor]
name = thm32
[driving]
kind = polynomial
coeffs = 1 0 0; 0 1 0
[harness]
T = 0.5
dt = 0.005
n_paths = 1000
seed = 18446744073709551615
battery = x, prod
[gates]
z = 4
""")
    m = spec.model()
    assert m.coord_dim == 3 and spec.seed == 2**64 - 1
    np.testing.assert_allclose(m.drift(np.zeros(3)), [0.25, 0, 0])
    assert spec.functionals()[1].name == "prod"
    assert spec.echo()["model_params"] == {"c": 0.25, "dim": 3}


def test_gradient_constructor_needs_gradient_system():
    msgs = problems("[model]\nname = heisenberg\n[constructor]\nname = driver\n")
    assert any("requires gradient_system mode" in m for m in msgs)


def test_sphere_ricci_is_valid():
    spec = scenarios.load("[model]\nname = sphere_gradient\n[constructor]\nname = ricci\n")
    assert scenarios.validate(spec) == []


def test_rejects_unknown_and_reports_everything():
    msgs = problems("""
[model]
name = flat
colour = red
[harness]
dt = -1
n_paths = 0
battery = x cube
[gates]
exclusion = 2
[extra]
a = 1
""")
    joined = "\n".join(msgs)
    for needle in ("model.colour", "[extra]", "harness.dt", "n_paths", "cube", "gates.exclusion"):
        assert needle in joined
    assert len(msgs) >= 6


def test_model_name_required_and_parse_errors():
    assert any("model.name" in m for m in problems("[harness]\nT = 1\n"))
    assert any("cannot parse" in m for m in problems("[model]\nname = flat\n[harness]\nn_paths = many\n"))
    assert any("not a parameter" in m for m in problems("[model]\nname = heisenberg\ndim = 4\n"))


def test_driving_validation():
    base = "[model]\nname = heisenberg\n[driving]\n"
    assert any("starts at 0" in m for m in problems(base + "kind = piecewise_linear\nknots = 0 1\nvalues = 1 0; 1 1\n"))
    assert any("2 entries" in m for m in problems(base + "kind = polynomial\ncoeffs = 1 2 3\n"))
    assert any("skew" in m for m in problems(
        "[model]\nname = flat\ndim = 2\n[constructor]\nname = rotation\n[driving]\nkind = rotation\nmatrix = 0 1; 1 0\n"))
    assert any("integer multiple" in m for m in problems("[model]\nname = flat\n[harness]\ndt = 0.3\n"))


def test_driver_path_must_be_tangent():
    msgs = problems("[model]\nname = sphere_gradient\n[constructor]\nname = driver\n"
                    "[driving]\nkind = polynomial\ncoeffs = 0 0 1\n")
    assert any("tangent space" in m for m in msgs)


def test_default_driver_path_is_tangent():
    spec = scenarios.get("sphere_driver")
    m = spec.model()
    v = spec.driving(m).values(spec.grid)
    assert np.max(np.abs(v[:, 2])) == 0.0


def test_catalogue_entries_validate():
    for name, spec in scenarios.CATALOG.items():
        assert scenarios.validate(spec) == [], name
    with pytest.raises(ConfigError):
        scenarios.get("nope")


def test_load_file(tmp_path):
    p = tmp_path / "s.ini"
    p.write_text("[model]\nname = flat\n")
    assert scenarios.load_file(p).model_name == "flat"
