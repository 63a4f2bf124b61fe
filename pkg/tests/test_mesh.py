import numpy as np
import pytest

from conftest import grid_mesh
from oracles import brute_barycentric, shoelace
from dslgcp.mesh import (
    MeshError,
    OutsideDomainError,
    TriMesh,
    assemble_fem,
    basis_eval,
    basis_matrix,
    build_mesh,
    locate,
    locate_many,
    mesh_quality,
    read_mesh,
    refine_uniform,
    region_weights,
    write_mesh,
)

SQUARE = [(0, 0), (1, 0), (1, 1), (0, 1)]
L_SHAPE = [(0, 0), (2, 0), (2, 1), (1, 1), (1, 2), (0, 2)]


def test_unit_square_coarse_covers_area():
    m = build_mesh(SQUARE, 1.0)
    assert m.n_triangles >= 2
    assert abs(m.area - 1.0) <= 1e-9


def test_max_edge_respected(unit_mesh):
    assert unit_mesh.edge_lengths().max() <= 0.1 * (1 + 1e-12)


def test_l_shape_area_matches_shoelace():
    m = build_mesh(L_SHAPE, 0.25)
    assert m.n_triangles > 0
    assert abs(m.area - shoelace(L_SHAPE)) <= 1e-9 * shoelace(L_SHAPE)
    assert abs(assemble_fem(m).mass_lumped.sum() - shoelace(L_SHAPE)) <= 1e-9 * shoelace(L_SHAPE)


def test_inner_region_finer():
    m = build_mesh([(0, 0), (4, 0), (4, 4), (0, 4)], 1.0, inner_region=[(1, 1), (3, 1), (3, 3), (1, 3)], inner_max_edge=0.25)
    V, T = m.vertices, m.triangles
    cent = V[T].mean(axis=1)
    inside = np.all((cent > 1) & (cent < 3), axis=1)
    e = np.stack([V[T[:, 1]] - V[T[:, 0]], V[T[:, 2]] - V[T[:, 1]], V[T[:, 0]] - V[T[:, 2]]], 1)
    longest = np.linalg.norm(e, axis=2).max(axis=1)
    assert longest[inside].max() <= 0.25 * (1 + 1e-12)
    assert longest.max() <= 1.0 * (1 + 1e-12)
    assert mesh_quality(m)["min_angle_deg"] > 20.0


@pytest.mark.parametrize(
    "poly",
    [
        [(0, 0), (1, 0), (2, 0)],  # collinear
        [(0, 0), (1, 0), (1, 0), (0, 1)],  # repeated vertex
        [(0, 0), (1, 1), (1, 0), (0, 1)],  # bow tie
    ],
)
def test_degenerate_polygons_rejected(poly):
    with pytest.raises(MeshError):
        build_mesh(poly, 0.5)


def test_nonpositive_max_edge():
    with pytest.raises(MeshError):
        build_mesh(SQUARE, 0.0)


def test_locate_vertex_and_centroid(unit_mesh):
    V, T = unit_mesh.vertices, unit_mesh.triangles
    k = 7
    b = locate(unit_mesh, V[T[k, 1]])
    assert sorted(np.round(b.coords, 12).tolist()) == [0.0, 0.0, 1.0]
    b = locate(unit_mesh, V[T[k]].mean(axis=0))
    assert b.triangle_index == k
    np.testing.assert_allclose(b.coords, [1 / 3] * 3, atol=1e-12)
    assert locate(unit_mesh, (2.0, 2.0)) is None


def test_locate_matches_brute_force(unit_mesh, rng):
    P = rng.random((1000, 2))
    tri, bc = locate_many(unit_mesh, P)
    V, T = unit_mesh.vertices, unit_mesh.triangles
    for p, k, c in zip(P, tri, bc):
        kb, cb = brute_barycentric(V, T, p)
        # points on shared edges may legitimately land in either triangle
        np.testing.assert_allclose(c @ V[T[k]], p, atol=1e-12)
        np.testing.assert_allclose(cb @ V[T[kb]], p, atol=1e-12)
        if kb != k:
            assert np.min(c) < 1e-9
        else:
            np.testing.assert_allclose(c, cb, atol=1e-10)
        assert abs(c.sum() - 1) < 1e-12 and np.all(c >= 0)


def test_basis_eval_vertex_and_midpoint(unit_mesh):
    V = unit_mesh.vertices
    j = 11
    row = basis_eval(unit_mesh, V[j]).toarray().ravel()
    assert row[j] == pytest.approx(1.0, abs=1e-12)
    assert np.count_nonzero(np.abs(row) > 1e-12) == 1
    i, k = unit_mesh.edges[5]
    row = basis_eval(unit_mesh, 0.5 * (V[i] + V[k])).toarray().ravel()
    assert row[i] == pytest.approx(0.5, abs=1e-12) and row[k] == pytest.approx(0.5, abs=1e-12)


def test_basis_outside_raises(unit_mesh):
    with pytest.raises(OutsideDomainError):
        basis_eval(unit_mesh, (1.5, 0.5))


def test_linear_reproduction_and_partition_of_unity(unit_mesh, rng):
    P = rng.random((500, 2))
    A = basis_matrix(unit_mesh, P)
    assert A.getnnz(axis=1).max() <= 3
    np.testing.assert_allclose(np.asarray(A.sum(axis=1)).ravel(), 1.0, atol=1e-12)
    f = lambda X: 2 * X[:, 0] - X[:, 1]  # noqa: E731
    np.testing.assert_allclose(A @ f(unit_mesh.vertices), f(P), rtol=1e-10, atol=1e-12)


def test_fem_single_triangle():
    m = TriMesh([(0, 0), (1, 0), (0, 1)], [(0, 1, 2)])
    fem = assemble_fem(m)
    np.testing.assert_allclose(fem.mass_lumped, [1 / 6] * 3, rtol=1e-14)
    np.testing.assert_allclose(fem.stiffness.toarray(), [[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]], atol=1e-14)


def test_fem_invariants(unit_mesh):
    fem = assemble_fem(unit_mesh)
    G, C = fem.stiffness, fem.mass
    rowmax = abs(G).max(axis=1).toarray().ravel()
    assert np.all(np.abs(G @ np.ones(unit_mesh.n_vertices)) <= 1e-10 * rowmax)
    assert abs(G - G.T).max() == 0
    assert abs(C.sum() - unit_mesh.area) <= 1e-9
    assert np.linalg.eigvalsh(C.toarray()).min() > 0
    assert np.linalg.eigvalsh(G.toarray()).min() > -1e-10


def test_dirichlet_energy_of_linear_field():
    m = grid_mesh(6, 4, 0.0, 0.0, 3.0, 2.0)
    a, b, c = 1.7, -0.4, 0.3
    x = a * m.vertices[:, 0] + b * m.vertices[:, 1] + c
    G = assemble_fem(m).stiffness
    # int |grad f|^2 over the 3 x 2 rectangle
    assert x @ (G @ x) == pytest.approx((a * a + b * b) * 6.0, rel=1e-12)


def test_degenerate_triangle_rejected():
    with pytest.raises(MeshError):
        TriMesh([(0, 0), (1, 0), (2, 0)], [(0, 1, 2)])


def test_refine_uniform_prolongation(unit_mesh):
    fine, P = refine_uniform(unit_mesh)
    assert fine.n_triangles == 4 * unit_mesh.n_triangles
    assert fine.area == pytest.approx(unit_mesh.area, rel=1e-12)
    f = 3 * unit_mesh.vertices[:, 0] + unit_mesh.vertices[:, 1]
    np.testing.assert_allclose(P @ f, 3 * fine.vertices[:, 0] + fine.vertices[:, 1], atol=1e-12)


def test_round_trip_bit_exact(tmp_path, unit_mesh):
    p = tmp_path / "m.txt"
    write_mesh(unit_mesh, p)
    back = read_mesh(p)
    assert np.array_equal(back.vertices, unit_mesh.vertices)
    assert np.array_equal(back.triangles, unit_mesh.triangles)
    write_mesh(back, tmp_path / "m2.txt")
    assert (tmp_path / "m2.txt").read_text() == p.read_text()


def test_region_weights(unit_mesh):
    w = region_weights(unit_mesh, [(0.2, 0.2), (0.7, 0.2), (0.7, 0.6), (0.2, 0.6)])
    assert w.sum() == pytest.approx(0.5 * 0.4, rel=1e-9)
    np.testing.assert_allclose(region_weights(unit_mesh, SQUARE), assemble_fem(unit_mesh).mass_lumped, rtol=1e-9)
    with pytest.raises(OutsideDomainError):
        region_weights(unit_mesh, [(0.5, 0.5), (1.5, 0.5), (1.5, 0.8)])
