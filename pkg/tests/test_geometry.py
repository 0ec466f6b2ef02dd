import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pathdiv import geometry as g, models
from pathdiv.errors import ModeError, NotInBundleError, SpanningError

finite = st.floats(-2.0, 2.0, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)


def unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 1e-3 else np.array([0.0, 0.0, 1.0])


@pytest.fixture(scope="module")
def heis():
    return models.heisenberg()


@pytest.fixture(scope="module")
def sphere():
    return models.sphere_gradient()


# --- frozen symbolic oracles ----------------------------------------------

def test_heisenberg_cometric_matches_symbolic(heis, frozen):
    d = frozen["heisenberg"]
    np.testing.assert_allclose(g.metric_matrix(heis, np.array(d["point"])), d["cometric"], atol=1e-14)


def test_heisenberg_cometric_at_origin_is_identity(heis):
    np.testing.assert_array_equal(g.metric_matrix(heis, np.zeros(3)), np.eye(3))


def test_heisenberg_adjoint_matches_symbolic(heis, frozen):
    d = frozen["heisenberg"]
    np.testing.assert_allclose(heis.adjoint_matrix(np.array(d["point"])), d["adjoint"], atol=1e-14)


def test_heisenberg_bracket_table_matches_symbolic(heis, frozen):
    d = frozen["heisenberg"]
    p = np.array(d["point"])
    got = [[g.lie_bracket(heis.frame[i], heis.family[J], p) for J in range(3)] for i in range(2)]
    np.testing.assert_allclose(got, d["brackets_X_V"], atol=1e-12)


def test_sphere_G_matches_symbolic(sphere, frozen):
    d = frozen["sphere"]
    np.testing.assert_allclose(g.coeff_G_along(sphere, np.array(d["point"]), np.array(d["v"])), d["G_v"],
                               atol=1e-12)


def test_sphere_G_closed_form(sphere, rng):
    x = sphere.sample_points(rng, 20)
    v = sphere.project_tangent(x, rng.standard_normal((20, 3)))
    ref = x[:, None, :] * v[:, :, None] - x[:, :, None] * v[:, None, :]
    np.testing.assert_allclose(g.coeff_G_along(sphere, x, v), ref, atol=1e-12)


def test_sphere_tensor_T_matches_symbolic(sphere, frozen):
    d = frozen["sphere"]
    x, y = np.array(d["point"]), np.array(d["y"])
    got = np.array([g.tensor_T(sphere, I, x, y) for I in range(3)])
    np.testing.assert_allclose(got, d["T_I_y"], atol=1e-7)


def test_sphere_alpha_matches_symbolic(sphere, frozen):
    d = frozen["sphere"]
    x = np.array(d["point"])
    np.testing.assert_allclose(g.coeff_alpha(sphere, 0, x), d["alpha_0"], atol=1e-6)
    np.testing.assert_allclose(g.coeff_alpha_fd(sphere, 0, x), d["alpha_0"], atol=1e-6)


def test_sphere_intrinsic_alpha_matches_symbolic(sphere, frozen):
    d = frozen["sphere"]
    x, v = np.array(d["point"]), np.array(d["v"])
    np.testing.assert_allclose(g.intrinsic_alpha(sphere, x, v, closed_form=False), d["intrinsic_alpha_v"],
                               atol=1e-6)
    np.testing.assert_allclose(g.intrinsic_alpha(sphere, x, v), d["intrinsic_alpha_v"], atol=1e-12)


def test_sphere_intrinsic_alpha_two_ways(sphere, rng):
    x = sphere.sample_points(rng, 10)
    v = sphere.project_tangent(x, rng.standard_normal((10, 3)))
    a = g.intrinsic_alpha(sphere, x, v, closed_form=False)
    np.testing.assert_allclose(a, g.intrinsic_alpha_fd(sphere, x, v), atol=1e-5)


def test_sphere_nabla_closed_form_matches_fd(sphere, rng):
    x = sphere.sample_points(rng, 10)
    v = sphere.project_tangent(x, rng.standard_normal((10, 3)))
    np.testing.assert_allclose(g.ljw_frame_derivative(sphere, x, v),
                               g.ljw_frame_derivative(sphere, x, v, h=1e-5), atol=1e-8)


# --- connection and tensors -------------------------------------------------

def test_ljw_independent_frame_product_rule(heis, rng):
    # nabla_v (a_i X_i) = v(a_i) X_i for pointwise independent frames
    x = rng.standard_normal((8, 3))
    v = rng.standard_normal((8, 3))
    a = lambda y: np.stack([np.sin(y[..., 0]), y[..., 1] * y[..., 2]], axis=-1)
    da = lambda y, w: np.stack([np.cos(y[..., 0]) * w[..., 0],
                                w[..., 1] * y[..., 2] + y[..., 1] * w[..., 2]], axis=-1)
    z = lambda y: g.matvec(heis.frame_matrix(y), a(y))
    got = g.ljw_derivative(heis, x, v, z)
    np.testing.assert_allclose(got, g.matvec(heis.frame_matrix(x), da(x, v)), atol=1e-8)
    np.testing.assert_allclose(g.ljw_frame_derivative(heis, x, v), 0.0, atol=1e-9)


def test_ljw_rejects_section_outside_bundle(heis):
    with pytest.raises(NotInBundleError):
        g.ljw_derivative(heis, np.zeros(3), np.ones(3), lambda y: np.broadcast_to([0.0, 0.0, 1.0], y.shape))


def test_tensor_T_independent_mode_is_bracket(heis, rng):
    # T_I(a X_i) = a [X_i, V_I]
    x = rng.standard_normal(3)
    for i in range(2):
        for I in range(3):
            t = g.tensor_T(heis, I, x, 2.5 * heis.frame[i](x))
            np.testing.assert_allclose(t, 2.5 * g.lie_bracket(heis.frame[i], heis.family[I], x), atol=1e-8)


def test_G_vanishes_for_independent_frames(heis, rng):
    x = rng.standard_normal((10, 3))
    for I in range(3):
        np.testing.assert_allclose(g.coeff_G(heis, I, x), 0.0, atol=1e-9)


def test_sphere_ljw_equals_levi_civita(sphere, rng):
    x = sphere.sample_points(rng, 10)
    v = sphere.project_tangent(x, rng.standard_normal((10, 3)))
    y0 = sphere.project_tangent(x, rng.standard_normal((10, 3)))
    ext = g.section_extension(sphere, x, y0)
    lc = g.levi_civita_derivative(sphere, x, v, ext)
    np.testing.assert_allclose(g.ljw_derivative(sphere, x, v, ext), lc, atol=1e-7)


def test_intrinsic_T_vanishes_on_sphere(sphere, rng):
    x = sphere.sample_points(rng, 30)
    a = sphere.project_tangent(x, rng.standard_normal((30, 3)))
    b = sphere.project_tangent(x, rng.standard_normal((30, 3)))
    assert np.max(np.abs(g.tensor_T_intrinsic(sphere, x, a, b))) <= 1e-7


def test_sphere_indexed_T_is_minus_xI_X(sphere, rng):
    x = sphere.sample_points(rng, 10)
    y = sphere.project_tangent(x, rng.standard_normal((10, 3)))
    for I in range(3):
        np.testing.assert_allclose(g.tensor_T(sphere, I, x, y), -x[:, I:I + 1] * y, atol=1e-7)


def test_heisenberg_christoffel_matches_symbolic(heis, frozen):
    d = frozen["heisenberg"]
    np.testing.assert_allclose(g.christoffel(heis, np.array(d["point"])), d["christoffel"], atol=1e-7)


def test_levi_civita_chart_matches_projection_formula(rng):
    # heisenberg chart metric: torsion-free and metric-compatible
    m = models.heisenberg()
    x = rng.standard_normal(3)
    a = g.VectorField(lambda y: np.stack([y[..., 1], y[..., 2] ** 2, np.ones_like(y[..., 0])], -1))
    b = g.VectorField(lambda y: np.stack([np.cos(y[..., 0]), y[..., 0] * y[..., 1], y[..., 2]], -1))
    tors = (g.levi_civita_derivative(m, x, a(x), b) - g.levi_civita_derivative(m, x, b(x), a)
            - g.lie_bracket(a, b, x))
    assert np.max(np.abs(tors)) < 1e-7


def test_ricci_of_unit_sphere(sphere, rng):
    x = sphere.sample_points(rng, 8)
    y = sphere.project_tangent(x, rng.standard_normal((8, 3)))
    ric = g.ricci(sphere, x, y)
    rel = np.linalg.norm(ric - y, axis=-1) / np.linalg.norm(y, axis=-1)
    assert np.max(rel) <= 1e-4


def test_projection_checks_sphere(sphere, rng):
    x = sphere.sample_points(rng, 50)
    v = sphere.project_tangent(x, rng.standard_normal((50, 3)))
    w = rng.standard_normal((50, 3))
    for name, res in g.projection_checks(sphere, x, v, w).items():
        assert np.max(res) <= 1e-8, name


def test_projection_checks_need_gradient_mode(heis):
    with pytest.raises(ModeError):
        g.projection_checks(heis, np.zeros(3), np.ones(3), np.ones(3))


# --- identities checked in both directions -------------------------------------

def test_left_inverse_holds_for_independent_frame(heis, rng):
    assert g.check_left_inverse(heis, rng.standard_normal((20, 3))) <= 1e-10


def test_left_inverse_fails_for_degenerate_frame():
    m = models.degenerate_demo()
    with pytest.raises(ModeError):
        g.check_left_inverse(m, np.zeros(2))
    # away from the line x = 0 the two fields are independent
    assert g.check_left_inverse(m, np.array([0.7, -0.2])) <= 1e-10


def test_spanning_failure_raises():
    m = models.degenerate_demo()
    with pytest.raises(SpanningError):
        g.check_spanning(m, np.array([0.0, 0.3]))


def test_sphere_adjoint_is_not_left_inverse(sphere):
    x = np.array([0.0, 0.0, 1.0])
    assert np.max(np.abs(sphere.adjoint_matrix(x) @ sphere.frame_matrix(x) - np.eye(3))) > 0.5
    assert g.is_gradient_frame(sphere, x)


def test_invariant_suites_of_builtins():
    for name in models.BUILTINS:
        rows = g.check_invariants(models.builtin(name), n_points=100, seed=42)
        if name == "degenerate_demo":
            assert rows[0].name == "spanning_margin" and not rows[0].passed
        else:
            assert all(r.passed for r in rows), [(r.name, r.residual) for r in rows if not r.passed]


def test_heisenberg_bracket_V1_V2_is_dz(heis, rng):
    p = rng.standard_normal(3)
    np.testing.assert_allclose(g.lie_bracket(heis.family[0], heis.family[1], p), [0, 0, 1], atol=1e-12)


# --- properties ---------------------------------------------------------------

@given(vec3, vec3, vec3, finite)
def test_bracket_antisymmetric_and_bilinear(p, c1, c2, s):
    heis = models.heisenberg()
    a = g.VectorField(lambda y: np.sin(y) + c1)
    b = heis.frame[0]
    ab, ba = g.lie_bracket(a, b, p), g.lie_bracket(b, a, p)
    np.testing.assert_allclose(ab + ba, 0.0, atol=1e-12)
    sb = g.VectorField(lambda y: s * heis.frame[0](y) + heis.frame[1](y))
    lhs = g.lie_bracket(a, sb, p)
    rhs = s * ab + g.lie_bracket(a, heis.frame[1], p)
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


@given(vec3, vec3)
def test_G_bitwise_antisymmetric(p, v):
    sphere = models.sphere_gradient()
    x = unit(p)
    G = g.coeff_G_along(sphere, x, sphere.project_tangent(x, v))
    assert np.array_equal(G, -G.T)


@given(vec3, vec3)
def test_reproduction_in_E(p, v):
    for m, x in ((models.heisenberg(), p), (models.sphere_gradient(), unit(p))):
        y = g.matvec(m.frame_matrix(x), g.matvec(m.adjoint_matrix(x), v))
        coeffs = [m.e_inner(x, y, xi(x)) for xi in m.frame]
        rebuilt = sum(c * xi(x) for c, xi in zip(coeffs, m.frame))
        np.testing.assert_allclose(rebuilt, y, atol=1e-8 * (1 + np.linalg.norm(y)))


@given(vec3, vec3)
def test_metric_reproduction(p, v):
    m = models.heisenberg()
    np.testing.assert_allclose(g.reproduce(m, p, v), v, atol=1e-9 * (1 + np.linalg.norm(v)))


@given(arrays(np.float64, (4, 3), elements=finite))
def test_pinv_full_column_rank(a):
    a = a + np.vstack([np.eye(3), np.zeros((1, 3))]) * 3.0
    np.testing.assert_allclose(g.pinv(a, 3), np.linalg.pinv(a), atol=1e-9)


@given(vec3)
def test_analytic_jacobians_match_fd(p):
    for m, x in ((models.heisenberg(), p), (models.sphere_gradient(), unit(p))):
        for f in m.frame:
            np.testing.assert_allclose(f.jacobian(x), f.fd_jacobian(x), atol=1e-7)
