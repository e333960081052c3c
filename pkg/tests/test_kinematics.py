import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from plasmoncell.cellproblem import CellProblem
from plasmoncell.fem import shape_functions
from plasmoncell.kinematics import (
    DegenerateDeformationError,
    MaterialParameters,
    deformation_gradient,
    deformation_gradient_at,
    directional_derivatives,
    drude_sigma,
    transformed_conductivity,
    transformed_permittivity,
)

from conftest import smooth_deformation

small = st.floats(-0.4, 0.4)
mat22 = arrays(float, (2, 2), elements=small)
unit_angle = st.floats(0, 2 * np.pi)


def _oracle_sigma(omega, omega_p, tau):
    return 1j * omega_p * (omega - 1j / tau) / (omega**2 + 1 / tau**2)


@pytest.mark.parametrize("omega, expected, tol", [(0.3, 0.00324 + 0.09722j, 1e-5), (0.5, 0.00117 + 0.05839j, 1e-4)])
def test_drude_values(omega, expected, tol):
    # the quoted 0.5 value differs from 0.0011674 + 0.0583708i in the fifth digit
    s = drude_sigma(omega, 4 / 137, 100)
    assert abs(s - expected) < tol
    assert s == pytest.approx(_oracle_sigma(omega, 4 / 137, 100), rel=1e-14)


@given(st.floats(0.01, 5), st.floats(1, 1e3))
def test_drude_zero_weight(omega, tau):
    assert drude_sigma(omega, 0.0, tau) == 0


@given(st.floats(0.01, 5), st.floats(1e-3, 1), st.floats(1, 1e3))
def test_drude_positive_real_part(omega, wp, tau):
    assert drude_sigma(omega, wp, tau).real > 0


@pytest.mark.parametrize("kwargs", [dict(omega=0), dict(tau=-1), dict(omega_p=-1), dict(eps=[[1, 0.1], [0, 1]]), dict(eps=[[1 - 1j, 0], [0, 1]])])
def test_material_validation(kwargs):
    with pytest.raises(ValueError):
        MaterialParameters(**kwargs)


def test_identity_state():
    s = deformation_gradient(np.zeros((3, 2, 2)))
    assert np.all(s.F == np.eye(2)) and np.all(s.J == 1)


def test_linear_field_reproduced(mesh2):
    A = np.array([[0.03, -0.01], [0.02, 0.015]])
    q = (mesh2.vertices - 0.5) @ A.T
    cell = int(np.flatnonzero(~mesh2.interface_cells())[5])
    s = deformation_gradient_at(mesh2, q, cell, np.array([[0.3, 0.6], [0.9, 0.1]]))
    np.testing.assert_allclose(s.F, np.broadcast_to(np.eye(2) + A, (2, 2, 2)), atol=1e-13)


@pytest.mark.parametrize("seed", range(4))
def test_jacobian_matches_finite_differences_of_map(mesh2, seed):
    q = smooth_deformation(mesh2, 0.03, seed)
    rng = np.random.default_rng(seed)
    cell = int(rng.integers(mesh2.n_cells))
    xi = rng.uniform(0.1, 0.9, 2)
    X, Q = mesh2.vertices[mesh2.cells[cell]], q[mesh2.cells[cell]]

    def y(p, field):
        N, _ = shape_functions(np.atleast_2d(p))
        return N[0] @ field

    h = 1e-6
    D_ref, D_def = np.empty((2, 2)), np.empty((2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        D_ref[:, j] = (y(xi + e, X) - y(xi - e, X)) / (2 * h)
        D_def[:, j] = D_ref[:, j] + (y(xi + e, Q) - y(xi - e, Q)) / (2 * h)
    J_fd = np.linalg.det(D_def) / np.linalg.det(D_ref)
    s = deformation_gradient_at(mesh2, q, cell, xi)
    assert s.J == pytest.approx(J_fd, abs=1e-6)


def test_permittivity_identity():
    eps = np.array([[2 + 0.1j, 0.3], [0.3, 1 + 0.2j]])
    s = deformation_gradient(np.zeros((2, 2)))
    np.testing.assert_allclose(transformed_permittivity(eps, s), eps)


def test_permittivity_isotropic_scaling():
    s = deformation_gradient(np.eye(2))
    np.testing.assert_allclose(transformed_permittivity(np.eye(2), s), np.eye(2), atol=1e-15)


@given(mat22)
def test_permittivity_spd(G):
    s = deformation_gradient(G)
    if s.J <= 0.05:
        return
    e = transformed_permittivity(np.eye(2), s)
    np.testing.assert_allclose(e, e.T, atol=1e-14)
    assert np.linalg.eigvalsh(e).min() > 0


@given(mat22, st.floats(0.0, 0.5), st.floats(0.01, 1.0))
def test_transformed_tensor_structure(G, loss, rest):
    # Im eps_hat stays symmetric positive definite for positive definite Im eps
    s = deformation_gradient(G)
    if s.J <= 0.05:
        return
    eps = np.array([[1 + 1j * rest, 0.1 + 0.05j * loss], [0.1 + 0.05j * loss, 2 + 1j * rest]])
    e = transformed_permittivity(eps, s)
    np.testing.assert_allclose(e.real, e.real.T, atol=1e-14)
    np.testing.assert_allclose(e.imag, e.imag.T, atol=1e-14)
    assert np.linalg.eigvalsh(e.imag).min() > 0


def test_permittivity_degenerate():
    with pytest.raises(DegenerateDeformationError):
        transformed_permittivity(np.eye(2), deformation_gradient(-np.eye(2)))


def test_conductivity_identity_and_scaling():
    sig = drude_sigma(0.3, 4 / 137, 100)
    t = np.array([0.6, 0.8])
    n = np.array([0.8, -0.6])
    assert transformed_conductivity(sig, deformation_gradient(np.zeros((2, 2))), t, n) == pytest.approx(sig)
    assert transformed_conductivity(sig, deformation_gradient(np.eye(2)), t, n) == pytest.approx(sig / 2)


@given(mat22, unit_angle)
def test_conductivity_forms_agree(G, a):
    s = deformation_gradient(G)
    if s.J <= 0.05:
        return
    t = np.array([np.cos(a), np.sin(a)])
    n = np.array([t[1], -t[0]])
    sig = drude_sigma(0.3, 4 / 137, 100)
    simple = transformed_conductivity(sig, s, t, n)
    explicit = transformed_conductivity(sig, s, t, n, explicit=True)
    assert abs(simple - explicit) <= 1e-12 * abs(simple)
    assert simple.real > 0


@given(mat22, unit_angle)
def test_nanson_identity(G, a):
    s = deformation_gradient(G)
    if s.J <= 0.05:
        return
    t = np.array([np.cos(a), np.sin(a)])
    n = np.array([-t[1], t[0]])
    assert s.normal_scaling(n) * s.J == pytest.approx(s.tangent_stretch(t), rel=1e-12)


def test_collapsed_tangent():
    s = deformation_gradient(np.array([[-1.0, 0.0], [0.0, 1.0]]) + np.array([[0, 0], [0, 0.0]]))
    with pytest.raises(DegenerateDeformationError):
        transformed_conductivity(1.0, deformation_gradient(np.array([[-1.0, 0], [0, 0.0]])), np.array([1.0, 0]))
    assert s.J == 0


def test_nanson_at_interface_points(mesh2, drude):
    P = CellProblem(mesh2, drude)
    f = P.frame
    for seed in range(5):
        q = smooth_deformation(mesh2, 0.03, seed)
        F = P.face_deformation_gradients(q)
        s = deformation_gradient(F - np.eye(2))
        t = np.broadcast_to(f.tangent[:, None, :], F.shape[:-1])
        n = np.broadcast_to(f.normal[:, None, :], F.shape[:-1])
        np.testing.assert_allclose(s.normal_scaling(n) * s.J, s.tangent_stretch(t), rtol=1e-12)


def test_rigid_translation_inside():
    s = deformation_gradient(np.zeros((4, 2, 2)))
    eps = np.array([[1.5, 0.2], [0.2, 1.1]])
    np.testing.assert_allclose(transformed_permittivity(eps, s), np.broadcast_to(eps, (4, 2, 2)))


def test_derivatives_zero_direction():
    s = deformation_gradient(np.array([[0.1, 0.05], [-0.02, 0.2]]))
    d = directional_derivatives(s, np.zeros((2, 2)), np.eye(2), 1.0, np.array([1.0, 0]), np.array([0, 1.0]))
    for arr in (d.dJ, d.dFinv, d.dadj, d.deps_hat, d.dstretch, d.dnormal_scaling, d.dsigma_hat):
        assert np.all(np.asarray(arr) == 0)


@pytest.mark.parametrize("m, n", [(0, 0), (0, 1), (1, 0), (1, 1)])
def test_det_derivative_at_identity(m, n):
    E = np.zeros((2, 2))
    E[m, n] = 1
    d = directional_derivatives(deformation_gradient(np.zeros((2, 2))), E)
    assert d.dJ == np.trace(E)


@pytest.mark.parametrize("seed", range(5))
def test_derivatives_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    G = 0.2 * rng.standard_normal((2, 2))
    H = rng.standard_normal((2, 2))
    a = rng.uniform(0, 2 * np.pi)
    t, n = np.array([np.cos(a), np.sin(a)]), np.array([-np.sin(a), np.cos(a)])
    eps = np.array([[1.2 + 0.1j, 0.3], [0.3, 0.9 + 0.05j]])
    sig = drude_sigma(0.3, 4 / 137, 100)
    s = deformation_gradient(G)
    d = directional_derivatives(s, H, eps, sig, t, n)

    def quantities(Gx):
        sx = deformation_gradient(Gx)
        return {
            "dJ": sx.J,
            "dFinv": sx.Finv,
            "deps_hat": transformed_permittivity(eps, sx),
            "dstretch": sx.tangent_stretch(t),
            "dnormal_scaling": sx.normal_scaling(n),
            "dsigma_hat": transformed_conductivity(sig, sx, t, n),
            "dadj": sx.adj,
        }

    for name in ("dJ", "dFinv", "deps_hat", "dstretch", "dnormal_scaling", "dsigma_hat", "dadj"):
        exact = np.asarray(getattr(d, name))
        best = np.inf
        for h in (1e-4, 1e-5, 1e-6, 1e-7):
            fd = (np.asarray(quantities(G + h * H)[name]) - np.asarray(quantities(G - h * H)[name])) / (2 * h)
            best = min(best, np.linalg.norm(fd - exact) / max(np.linalg.norm(exact), 1e-14))
        assert best < 1e-7, name
