import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from plasmoncell.geometry import generate_reference_mesh
from plasmoncell.kinematics import MaterialParameters

settings.register_profile("default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ENZ_TARGET = np.array([[0.5 + 0.01j, 0.05], [0.05, 0.5 + 0.01j]])


@pytest.fixture(scope="session")
def mesh0():
    return generate_reference_mesh(0.3, 0)


@pytest.fixture(scope="session")
def mesh1():
    return generate_reference_mesh(0.3, 1)


@pytest.fixture(scope="session")
def mesh2():
    return generate_reference_mesh(0.3, 2)


@pytest.fixture(scope="session")
def drude():
    return MaterialParameters(omega=0.3, omega_p=4 / 137, tau=100.0)


def smooth_deformation(mesh, amplitude=0.02, seed=0):
    """Smooth random field vanishing on the cell boundary, shape (n_vertices, 2)."""
    rng = np.random.default_rng(seed)
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    bump = np.sin(np.pi * x) * np.sin(np.pi * y)
    q = np.zeros((mesh.n_vertices, 2))
    for k in range(1, 3):
        for l in range(1, 3):
            c = rng.uniform(-1, 1, 2)
            q += np.outer(bump * np.cos(k * np.pi * x + l) * np.sin(l * np.pi * y + k), c)
    q *= amplitude
    q[mesh.boundary_vertices()] = 0.0
    return q


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: (len(k), k)):
        ok, detail = RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
