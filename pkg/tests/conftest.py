import numpy as np
import pytest

from multimatch.mesh import Mesh
from multimatch.synthetic import grid, icosphere


def tetrahedron():
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    t = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return Mesh(v, t, id="tet")


def random_mesh(seed, nx=5, ny=4):
    """Jittered grid lifted onto a random height field."""
    rng = np.random.default_rng(seed)
    g = grid(nx, ny, size=rng.uniform(0.5, 3.0), jitter=0.3, seed=seed)
    v = np.array(g.vertices)
    v[:, 2] = 0.2 * rng.standard_normal(len(v))
    return Mesh(v, g.triangles, id=f"rand{seed}")


@pytest.fixture(scope="session")
def sphere2():
    return icosphere(2)


@pytest.fixture
def tet():
    return tetrahedron()


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record and print one pass/fail line for an acceptance criterion."""
    def report(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}: {detail}"
        print(line)
        _CRITERIA[number] = line
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
