import warnings

import numpy as np
import pytest

from pathdiv import functionals as fn, sde
from pathdiv.errors import DimensionError

GRID = sde.TimeGrid(1.0, 64)


@pytest.mark.parametrize("name", ["x", "x2", "sinx", "prod", "gauss"])
@pytest.mark.parametrize("dim", [1, 3])
def test_chain_rule_matches_central_difference(name, dim, rng):
    phi = fn.make_functional(name, 1.0, dim)
    x = rng.normal(size=(GRID.steps + 1, 5, dim))
    eta = rng.normal(size=x.shape)
    eps = 1e-5
    fd = (phi(x + eps * eta, GRID) - phi(x - eps * eta, GRID)) / (2 * eps)
    np.testing.assert_allclose(fn.directional_derivative(phi, x, eta, GRID), fd, rtol=1e-6, atol=1e-8)


def test_linear_functional_layout():
    phi = fn.make_functional("x", 1.0, 3)
    assert phi.times == (0.25, 0.5, 1.0)
    x = np.zeros((GRID.steps + 1, 1, 3))
    x[64, 0, 0] = 1.0
    x[32, 0, 1] = 10.0
    x[16, 0, 2] = 100.0
    x[64, 0, 2] = 1000.0
    assert phi(x, GRID)[0] == 111.0
    assert fn.make_functional("x", 1.0, 1).times == (1.0,)


def test_sample_times_checked():
    with pytest.raises(ValueError):
        fn.CylindricalFunctional("bad", (0.5, 0.25), None, None)
    phi = fn.make_functional("gauss", 2.0, 1)
    with pytest.raises(DimensionError):
        phi(np.zeros((GRID.steps + 1, 1, 1)), GRID)
    off = fn.CylindricalFunctional("off", (0.3,), lambda s: s[0][..., 0], None)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        off(np.zeros((GRID.steps + 1, 1, 1)), GRID)
    assert any("off the grid" in str(w.message) for w in rec)


def test_unknown_functional():
    with pytest.raises(ValueError, match="unknown functional"):
        fn.make_functional("cube", 1.0, 1)
