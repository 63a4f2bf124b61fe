import numpy as np
import pytest

from dslgcp.mesh import TriMesh, build_mesh

from _report import ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k} [{name}]: {'PASS' if ok else 'FAIL'} {detail}".rstrip())


def grid_mesh(nx: int, ny: int | None = None, x0=0.0, y0=0.0, x1=1.0, y1=1.0, diagonal="alternate") -> TriMesh:
    """Structured triangulation of a rectangle with ``nx`` by ``ny`` cells."""
    ny = nx if ny is None else ny
    xs, ys = np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    V = np.column_stack([X.ravel(), Y.ravel()])
    idx = lambda i, j: j * (nx + 1) + i  # noqa: E731
    T = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            if diagonal == "alternate" and (i + j) % 2:
                T += [(a, b, d), (b, c, d)]
            else:
                T += [(a, b, c), (a, c, d)]
    return TriMesh(V, np.array(T))


@pytest.fixture(scope="session")
def unit_mesh():
    return build_mesh([(0, 0), (1, 0), (1, 1), (0, 1)], 0.1)


@pytest.fixture(scope="session")
def small_mesh():
    return grid_mesh(4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
