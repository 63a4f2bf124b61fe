import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import grid_mesh
from dslgcp.integration import Transect, build_scheme, integral
from dslgcp.mesh import assemble_fem, basis_matrix
from dslgcp.model import CovariateField, center_covariate
from dslgcp.predict import rwpci

MESH = grid_mesh(5)
coord = st.floats(0.0, 1.0, allow_nan=False)
inner = st.floats(0.05, 0.95, allow_nan=False)
finite = st.floats(-5, 5, allow_nan=False)


@given(st.lists(st.tuples(coord, coord), min_size=1, max_size=20))
def test_basis_partition_of_unity(pts):
    B = basis_matrix(MESH, np.array(pts))
    np.testing.assert_allclose(np.asarray(B.sum(axis=1)).ravel(), 1.0, atol=1e-12)
    assert B.min() >= -1e-12


@given(finite, finite, finite, st.lists(st.tuples(coord, coord), min_size=1, max_size=10))
def test_affine_functions_interpolate_exactly(a, b, c, pts):
    P = np.array(pts)
    f = a + b * MESH.vertices[:, 0] + c * MESH.vertices[:, 1]
    np.testing.assert_allclose(basis_matrix(MESH, P) @ f, a + b * P[:, 0] + c * P[:, 1], atol=1e-11)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(inner, inner), min_size=2, max_size=5, unique=True), st.floats(0.001, 0.05), st.integers(2, 9))
def test_scheme_weight_conservation(wp, hw, R):
    W = np.array(wp)
    if np.min(np.linalg.norm(np.diff(W, axis=0), axis=1)) < 1e-6:
        return
    tr = Transect("t", W, 0, hw)
    sch = build_scheme(MESH, [tr], R=R)
    assert abs(sch.weight.sum() - tr.strip_area) <= 1e-12 * tr.strip_area
    assert abs(integral(sch, np.zeros(MESH.n_vertices))[1] - tr.strip_area) <= 1e-12 * tr.strip_area


@given(arrays(float, (50, 3), elements=st.floats(0.01, 100)), st.floats(0.01, 100))
def test_rwpci_scale_invariance(samples, c):
    q = np.quantile(samples, [0.25, 0.5, 0.75], axis=0)
    qc = np.quantile(c * samples, [0.25, 0.5, 0.75], axis=0)
    np.testing.assert_allclose(rwpci(*qc), rwpci(*q), rtol=1e-9, atol=1e-12)
    assert np.all(rwpci(*q) >= 0)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (MESH.n_vertices, 3), elements=st.floats(-1e3, 1e3)))
def test_centering_reconstruction(X):
    c = center_covariate(CovariateField("s", X, (1, 2, 3)), MESH)
    scale = max(1.0, np.abs(X).max())
    rec = c.overall + c.yearly[None, :] + c.spatial[:, None] + c.residual
    np.testing.assert_allclose(rec, X, atol=1e-12 * scale)
    assert abs(c.yearly.sum()) <= 1e-12 * scale
    w = assemble_fem(MESH).mass_lumped
    assert abs(c.spatial @ w) / w.sum() <= 1e-12 * scale
    assert np.max(np.abs(c.residual.mean(axis=1))) <= 1e-12 * scale
    assert np.max(np.abs(c.residual.T @ w)) / w.sum() <= 1e-12 * scale
