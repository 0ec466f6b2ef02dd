import io
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import expm

from pathdiv import geometry as g, models, sde
from pathdiv.errors import DimensionError, SimulationError

GRID = sde.TimeGrid(1.0, 1000)


def heis_paths(paths=50, seed=7, grid=GRID, flow=False):
    h = models.heisenberg()
    noise = sde.NoisePath.generate(grid, 2, seed, range(paths))
    return h, noise, sde.simulate(h, grid, noise, flow=flow)


def discrete_area(noise):
    w = noise.w()
    dw = noise.increments
    a = 0.5 * ((w[:-1, :, 0] + w[1:, :, 0]) * dw[:, :, 1] - (w[:-1, :, 1] + w[1:, :, 1]) * dw[:, :, 0])
    out = np.zeros(w.shape[:2])
    out[1:] = 0.5 * np.cumsum(a, axis=0)
    return out


def test_grid_validation():
    with pytest.raises(ValueError):
        sde.TimeGrid.from_dt(1.0, 0.0)
    with pytest.raises(ValueError):
        sde.TimeGrid.from_dt(1.0, 0.3)
    grid = sde.TimeGrid.from_dt(1.0, 2.5e-4)
    assert grid.steps == 4000 and grid.coarsen(4).steps == 1000
    assert grid.index(0.5) == (2000, True)
    assert not grid.index(0.50001)[1]


@given(st.integers(0, 2**63), st.lists(st.integers(0, 10**9), min_size=1, max_size=6, unique=True))
def test_noise_depends_only_on_seed_and_stream(seed, ids):
    grid = sde.TimeGrid(1.0, 16)
    together = sde.NoisePath.generate(grid, 2, seed, ids).increments
    for p, sid in enumerate(ids):
        alone = sde.NoisePath.generate(grid, 2, seed, [sid]).increments[:, 0]
        assert np.array_equal(together[:, p], alone)
    rev = sde.NoisePath.generate(grid, 2, seed, ids[::-1]).increments
    assert np.array_equal(rev[:, ::-1], together)


def test_noise_scale():
    noise = sde.NoisePath.generate(sde.TimeGrid(1.0, 100), 1, 3, range(4000))
    var = np.var(noise.w()[-1, :, 0])
    assert abs(var - 1.0) < 5 * np.sqrt(2 / 4000)


def test_flat_path_is_noise():
    m = models.flat(2)
    noise = sde.NoisePath.generate(GRID, 2, 7, range(5))
    assert np.array_equal(sde.simulate(m, GRID, noise).x, noise.w())


def test_heisenberg_closed_form_on_common_increments():
    _, noise, path = heis_paths()
    w = noise.w()
    np.testing.assert_allclose(path.x[:, :, :2], w, atol=1e-13)
    np.testing.assert_allclose(path.x[:, :, 2], discrete_area(noise), atol=1e-12)


def test_heisenberg_strong_order_half_on_independent_grids():
    h = models.heisenberg()
    fine = sde.TimeGrid(1.0, 2**14)
    noise = sde.NoisePath.generate(fine, 2, 11, range(300))
    ref = discrete_area(noise)[-1]
    errs = []
    for steps in (256, 1024):
        coarse = noise.coarsen(fine.steps // steps)
        x = sde.simulate(h, coarse.grid, coarse).x
        errs.append(np.sqrt(np.mean((x[-1, :, 2] - ref) ** 2)))
    assert 0.3 <= errs[1] / errs[0] <= 0.8


def test_derivative_flow_matches_finite_differences():
    h, noise, path = heis_paths(flow=True)
    eps = 1e-5
    yfd = np.empty((50, 3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = eps
        up = sde.simulate(h, GRID, noise, x0=h.origin + e).x[-1]
        dn = sde.simulate(h, GRID, noise, x0=h.origin - e).x[-1]
        yfd[:, :, j] = (up - dn) / (2 * eps)
    rel = np.linalg.norm(yfd - path.Y[-1], axis=(-2, -1)) / np.linalg.norm(path.Y[-1], axis=(-2, -1))
    assert np.max(rel) <= 0.01


def test_derivative_flow_separate_pass_equals_inline():
    h, noise, path = heis_paths(paths=5, flow=True)
    again = sde.derivative_flow(h, sde.simulate(h, GRID, noise))
    np.testing.assert_allclose(again.Y, path.Y, atol=1e-14)


def test_linear_commuting_fields_flow_is_exponential():
    a1 = np.array([[0.0, 1.0], [-1.0, 0.0]])
    a2 = 0.5 * np.eye(2)
    frame = (g.VectorField(lambda x: x @ a1.T, lambda x: np.broadcast_to(a1, x.shape + (2,))),
             g.VectorField(lambda x: x @ a2.T, lambda x: np.broadcast_to(a2, x.shape + (2,))))
    m = g.GeometryModel("linear", 2, frame, frame, np.array([1.0, 0.0]))
    noise = sde.NoisePath.generate(GRID, 2, 5, range(10))
    path = sde.simulate(m, GRID, noise, flow=True)
    w = noise.w()[-1]
    exact = np.stack([expm(a1 * wi[0] + a2 * wi[1]) for wi in w])
    assert np.max(np.abs(path.Y[-1] - exact)) <= 20 * GRID.dt
    # linear fields: the flow matrix maps the initial point exactly
    np.testing.assert_allclose(g.matvec(path.Y[-1], m.origin), path.x[-1], atol=1e-12)


def test_inverse_flow_and_pullback():
    h, _, path = heis_paths(flow=True)
    sde.inverse_flow(path)
    assert np.max(np.abs(path.Y @ path.Z - np.eye(3))) <= 10 * GRID.dt
    for b in h.family:
        q, direct = sde.pullback_evolution(h, path, b)
        assert np.max(np.abs(q - direct)) <= 20 * np.sqrt(GRID.dt)


def test_pullback_of_central_field_is_constant():
    h, _, path = heis_paths(paths=5, flow=True)
    sde.inverse_flow(path)
    q, direct = sde.pullback_evolution(h, path, h.family[2])
    np.testing.assert_allclose(q, np.broadcast_to([0.0, 0.0, 1.0], q.shape), atol=1e-12)
    np.testing.assert_allclose(direct, q, atol=1e-12)


def test_inverse_flow_requires_flow():
    _, _, path = heis_paths(paths=2)
    with pytest.raises(SimulationError):
        sde.inverse_flow(path)


def test_great_circle_quarter_turn():
    s = models.sphere_gradient()
    t = np.linspace(0.0, np.pi / 2, 2001)
    xs = np.stack([np.sin(t), 0 * t, np.cos(t)], -1)[:, None, :]
    U = sde.parallel_transport(s, None, xs)[-1, 0]
    # the velocity direction e1 at the pole turns into -e3, e2 is untouched
    np.testing.assert_allclose(U @ [1.0, 0.0, 0.0], [0.0, 0.0, -1.0], atol=1e-6)
    np.testing.assert_allclose(U @ [0.0, 1.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)


def test_transport_isometry_embedded():
    s = models.sphere_gradient()
    noise = sde.NoisePath.generate(GRID, 3, 1, range(20))
    path = sde.simulate(s, GRID, noise)
    U = sde.parallel_transport(s, path)
    assert np.max(np.abs(np.swapaxes(U, -1, -2) @ U - np.eye(3))) <= 1e-10
    # tangent vectors at o stay tangent
    v = g.matvec(U, np.broadcast_to([1.0, -0.5, 0.0], path.x.shape))
    assert np.max(np.abs(np.sum(v * path.x, axis=-1))) <= 1e-10


def test_transport_isometry_chart():
    h, _, path = heis_paths(paths=5)
    U = sde.parallel_transport(h, path)
    g0 = g.lower_metric(h, h.origin)
    gk = g.lower_metric(h, path.x)
    a, b = np.array([1.0, 0.2, -0.3]), np.array([0.0, 1.0, 0.5])
    ua, ub = g.matvec(U, a), g.matvec(U, b)
    lhs = np.einsum("...a,...ab,...b->...", ua, gk, ub)
    assert np.max(np.abs(lhs - a @ g0 @ b)) <= 1e-10


def test_sphere_paths_stay_on_sphere():
    s = models.sphere_gradient()
    path = sde.simulate(s, GRID, sde.NoisePath.generate(GRID, 3, 2, range(10)))
    assert np.max(np.abs(np.linalg.norm(path.x, axis=-1) - 1)) <= 1e-14


def test_non_strict_simulation_flags_bad_paths():
    blow = g.VectorField(lambda x: x ** 3 * 50.0)
    m = g.GeometryModel("blowup", 1, (blow,), (blow,), np.array([1.0]))
    noise = sde.NoisePath(GRID, np.full((1000, 2, 1), 0.05) * np.array([1.0, 0.0])[None, :, None])
    with pytest.raises(SimulationError):
        sde.simulate(m, GRID, noise)
    path = sde.simulate(m, GRID, noise, strict=False)
    assert path.finite.tolist() == [False, True]


def test_dimension_checks():
    h = models.heisenberg()
    with pytest.raises(DimensionError):
        sde.simulate(h, GRID, sde.NoisePath.generate(GRID, 3, 0, [0]))


def test_stratonovich_to_ito_on_w():
    noise = sde.NoisePath.generate(GRID, 1, 4, range(2000))
    w = noise.w()
    res = sde.stratonovich_to_ito(w, noise.increments)
    wt = w[-1, :, 0]
    np.testing.assert_allclose(res.stratonovich, 0.5 * wt**2, atol=1e-12)
    np.testing.assert_allclose(res.correction, 0.5 * np.sum(noise.increments[:, :, 0] ** 2, axis=0), atol=1e-12)
    l2 = np.sqrt(np.mean((res.ito - (0.5 * wt**2 - 0.5)) ** 2))
    assert l2 <= 3 * np.sqrt(GRID.dt)


def test_girsanov_flat_gaussian():
    m = models.drifted_flat(dim=1, c=0.4)
    base = m.without_drift()
    grid = sde.TimeGrid(1.0, 200)
    noise = sde.NoisePath.generate(grid, 1, 9, range(50_000))
    path = sde.simulate(base, grid, noise, keep_predictor=False)
    G = sde.girsanov_weight(m, path)
    se = np.std(G) / np.sqrt(G.size)
    assert abs(np.mean(G) - 1.0) <= 3 * se
    # E[w_T G] = E[w_T + cT] = cT
    val = path.x[-1, :, 0] * G
    assert abs(np.mean(val) - 0.4) <= 3 * np.std(val) / np.sqrt(G.size)


def test_girsanov_rejects_drift_outside_span():
    h = models.heisenberg()
    bad = replace(h, drift=g.VectorField.constant([0.0, 0.0, 1.0]))
    noise = sde.NoisePath.generate(GRID, 2, 0, [0])
    path = sde.simulate(h, GRID, noise)
    with pytest.raises(Exception, match="span"):
        sde.girsanov_log_weight(bad, path)


def test_csv_dump_column_order():
    h, _, path = heis_paths(paths=2, flow=True)
    sde.inverse_flow(path)
    buf = io.StringIO()
    path.to_csv(buf, path_index=1)
    lines = buf.getvalue().splitlines()
    head = lines[0].split(",")
    assert head[:7] == ["t", "x0", "x1", "x2", "has_Y", "has_Z", "has_U"]
    assert head[7] == "Y00" and head[16] == "Z00" and len(head) == 25
    assert len(lines) == GRID.steps + 2
    row = lines[-1].split(",")
    assert float(row[3]) == path.x[-1, 1, 2]
