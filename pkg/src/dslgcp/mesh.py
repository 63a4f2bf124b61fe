"""Planar triangulations with piecewise-linear (P1) finite elements.

Coordinates are planar kilometres; any map projection happens upstream.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

__all__ = [
    "MeshError",
    "OutsideDomainError",
    "TriMesh",
    "Barycentric",
    "FemMatrices",
    "build_mesh",
    "locate",
    "locate_many",
    "basis_eval",
    "basis_matrix",
    "assemble_fem",
    "refine_uniform",
    "polygon_area",
    "region_weights",
    "mesh_quality",
    "write_mesh",
    "read_mesh",
]

VERTEX_TOL = 1e-9
BARY_TOL = 1e-12
MESH_FORMAT = "dslgcp-mesh 1"


class MeshError(ValueError):
    """Invalid geometry or a triangulation that violates mesh invariants."""


class OutsideDomainError(ValueError):
    """A point lies outside the triangulated domain."""


def polygon_area(poly) -> float:
    """Shoelace area of a closed polygon given as an (n, 2) vertex array."""
    p = np.asarray(poly, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


@dataclass(frozen=True)
class Barycentric:
    triangle_index: int
    coords: np.ndarray


@dataclass(frozen=True)
class FemMatrices:
    """P1 mass (consistent and lumped) and stiffness matrices."""

    mass: sp.csr_matrix
    mass_lumped: np.ndarray
    stiffness: sp.csr_matrix


class _TriangleLocator:
    """Uniform bucket grid over triangle bounding boxes."""

    def __init__(self, vertices, triangles):
        self.vertices = vertices
        self.triangles = triangles
        tri_xy = vertices[triangles]
        lo = tri_xy.min(axis=1)
        hi = tri_xy.max(axis=1)
        self.origin = vertices.min(axis=0)
        extent = np.maximum(vertices.max(axis=0) - self.origin, 1e-300)
        n_cells = max(1, int(math.sqrt(len(triangles))))
        self.cell = extent / n_cells
        self.shape = (n_cells, n_cells)
        i0 = self._cell_index(lo)
        i1 = self._cell_index(hi)
        rows, tris = [], []
        for t in range(len(triangles)):
            ix = np.arange(i0[t, 0], i1[t, 0] + 1)
            iy = np.arange(i0[t, 1], i1[t, 1] + 1)
            cells = (ix[:, None] * n_cells + iy[None, :]).ravel()
            rows.append(cells)
            tris.append(np.full(cells.size, t))
        rows = np.concatenate(rows)
        tris = np.concatenate(tris)
        order = np.argsort(rows, kind="stable")
        self.cell_tris = tris[order]
        self.cell_ptr = np.searchsorted(rows[order], np.arange(n_cells * n_cells + 1))
        a = tri_xy[:, 0]
        e1 = tri_xy[:, 1] - a
        e2 = tri_xy[:, 2] - a
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        # inverse of [e1 e2] per triangle
        self.inv = np.stack(
            [
                np.stack([e2[:, 1], -e2[:, 0]], axis=1),
                np.stack([-e1[:, 1], e1[:, 0]], axis=1),
            ],
            axis=1,
        ) / det[:, None, None]
        self.a = a

    def _cell_index(self, xy):
        idx = np.floor((xy - self.origin) / self.cell).astype(int)
        return np.clip(idx, 0, np.array(self.shape) - 1)

    def bary(self, tri, pts):
        rel = pts - self.a[tri]
        l12 = np.einsum("nij,nj->ni", self.inv[tri], rel)
        return np.column_stack([1.0 - l12[:, 0] - l12[:, 1], l12])

    def find(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        n = len(pts)
        out_tri = np.full(n, -1)
        out_bc = np.zeros((n, 3))
        if n == 0:
            return out_tri, out_bc
        ci = self._cell_index(pts)
        outside_box = np.any(
            (pts < self.origin - 1e-9) | (pts > self.origin + self.cell * self.shape + 1e-9), axis=1
        )
        flat = ci[:, 0] * self.shape[0] + ci[:, 1]
        start = self.cell_ptr[flat]
        count = self.cell_ptr[flat + 1] - start
        count[outside_box] = 0
        pid = np.repeat(np.arange(n), count)
        offs = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
        cand = self.cell_tris[np.repeat(start, count) + offs]
        if cand.size == 0:
            return out_tri, out_bc
        bc = self.bary(cand, pts[pid])
        score = bc.min(axis=1)
        # best candidate per point = most interior
        order = np.lexsort((-score, pid))
        pid_s = pid[order]
        first = np.r_[True, pid_s[1:] != pid_s[:-1]]
        sel = order[first]
        ok = score[sel] >= -1e-10
        p_ok = pid[sel][ok]
        out_tri[p_ok] = cand[sel][ok]
        c = np.clip(bc[sel][ok], 0.0, None)
        out_bc[p_ok] = c / c.sum(axis=1, keepdims=True)
        return out_tri, out_bc


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Planar triangulation.

    Triangles are reoriented counter-clockwise on construction; invariants
    (positive areas, distinct vertices, valid indices, conforming edges) are
    checked and violations raise :class:`MeshError`.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    crs: str = "planar km"
    vertex_tol: float = VERTEX_TOL
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=float))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 2:
            raise MeshError(f"vertices must have shape (n, 2), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3 or len(t) == 0:
            raise MeshError(f"triangles must have shape (k, 3) with k > 0, got {t.shape}")
        if t.min() < 0 or t.max() >= len(v):
            raise MeshError("triangle references an invalid vertex index")
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise MeshError("triangle with repeated vertex")
        signed = _signed_areas(v, t)
        flip = signed < 0
        if np.any(flip):
            t = t.copy()
            t[flip] = t[flip][:, [0, 2, 1]]
            signed = np.abs(signed)
        if np.any(signed <= 0):
            bad = int(np.flatnonzero(signed <= 0)[0])
            raise MeshError(f"triangle {bad} has zero area")
        close = cKDTree(v).query_pairs(self.vertex_tol)
        if close:
            i, j = sorted(close)[0]
            raise MeshError(f"vertices {i} and {j} are closer than {self.vertex_tol} km")
        directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        if len(np.unique(directed, axis=0)) != len(directed):
            raise MeshError("inconsistent orientation or edge shared by more than two triangles")
        undirected = np.sort(directed, axis=1)
        _, counts = np.unique(undirected, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("edge shared by more than two triangles")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def areas(self) -> np.ndarray:
        if "areas" not in self._cache:
            self._cache["areas"] = _signed_areas(self.vertices, self.triangles)
        return self._cache["areas"]

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted vertex pairs."""
        if "edges" not in self._cache:
            t = self.triangles
            e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
            self._cache["edges"] = np.unique(e, axis=0)
        return self._cache["edges"]

    @property
    def boundary_edges(self) -> np.ndarray:
        if "boundary_edges" not in self._cache:
            t = self.triangles
            e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
            u, counts = np.unique(e, axis=0, return_counts=True)
            self._cache["boundary_edges"] = u[counts == 1]
        return self._cache["boundary_edges"]

    @property
    def boundary_vertex_flags(self) -> np.ndarray:
        flags = np.zeros(self.n_vertices, dtype=bool)
        flags[self.boundary_edges.ravel()] = True
        return flags

    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def bbox_diameter(self) -> float:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(np.hypot(*(hi - lo)))

    @property
    def locator(self) -> _TriangleLocator:
        if "locator" not in self._cache:
            self._cache["locator"] = _TriangleLocator(self.vertices, self.triangles)
        return self._cache["locator"]


def _signed_areas(v, t):
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def locate_many(mesh: TriMesh, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised point location.

    Returns ``(triangle_index, coords)`` where outside points get index -1
    and zero coordinates.
    """
    return mesh.locator.find(points)


def locate(mesh: TriMesh, p) -> Barycentric | None:
    """Barycentric coordinates of ``p``, or ``None`` outside the domain."""
    tri, bc = locate_many(mesh, np.asarray(p, dtype=float).reshape(1, 2))
    if tri[0] < 0:
        return None
    return Barycentric(int(tri[0]), bc[0])


def basis_matrix(mesh: TriMesh, points) -> sp.csr_matrix:
    """Sparse ``(n_points, n_vertices)`` matrix of P1 basis values."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tri, bc = locate_many(mesh, points)
    if np.any(tri < 0):
        bad = int(np.flatnonzero(tri < 0)[0])
        raise OutsideDomainError(f"point {points[bad].tolist()} lies outside the mesh domain")
    n = len(points)
    rows = np.repeat(np.arange(n), 3)
    cols = mesh.triangles[tri].ravel()
    A = sp.csr_matrix((bc.ravel(), (rows, cols)), shape=(n, mesh.n_vertices))
    A.eliminate_zeros()
    return A


def basis_eval(mesh: TriMesh, p) -> sp.csr_matrix:
    """Row vector of basis function values ``phi_j(p)``."""
    return basis_matrix(mesh, np.asarray(p, dtype=float).reshape(1, 2))


def assemble_fem(mesh: TriMesh, area_tol: float = 1e-14) -> FemMatrices:
    """Assemble P1 mass and stiffness matrices; the lumped mass is the row sum of C."""
    v, t = mesh.vertices, mesh.triangles
    areas = _signed_areas(v, t)
    scale = max(mesh.bbox_diameter() ** 2, 1e-300)
    bad = np.flatnonzero(areas <= area_tol * scale)
    if bad.size:
        raise MeshError(f"degenerate triangle {int(bad[0])} (area {areas[bad[0]]:.3e})")
    # edge opposite vertex i
    e = np.stack(
        [v[t[:, 2]] - v[t[:, 1]], v[t[:, 0]] - v[t[:, 2]], v[t[:, 1]] - v[t[:, 0]]], axis=1
    )
    Gloc = np.einsum("kid,kjd->kij", e, e) / (4.0 * areas[:, None, None])
    Mloc = areas[:, None, None] / 12.0 * (np.ones((3, 3)) + np.eye(3))
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_vertices
    G = sp.csr_matrix((Gloc.ravel(), (rows, cols)), shape=(n, n))
    C = sp.csr_matrix((Mloc.ravel(), (rows, cols)), shape=(n, n))
    G = ((G + G.T) * 0.5).tocsr()
    lumped = np.asarray(C.sum(axis=1)).ravel()
    return FemMatrices(mass=C, mass_lumped=lumped, stiffness=G)


def refine_uniform(mesh: TriMesh) -> tuple[TriMesh, sp.csr_matrix]:
    """Split every triangle into four through its edge midpoints.

    Returns the refined mesh and the ``(n_fine, n_coarse)`` prolongation
    matrix that linearly interpolates coarse vertex values.
    """
    edges = mesh.edges
    n = mesh.n_vertices
    mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    key = edges[:, 0] * n + edges[:, 1]
    order = np.argsort(key)
    t = mesh.triangles

    def mid(a, b):
        k = np.minimum(a, b) * n + np.maximum(a, b)
        return n + order[np.searchsorted(key[order], k)]

    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
    tris = np.concatenate(
        [np.column_stack(x) for x in ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))]
    )
    fine = TriMesh(np.vstack([mesh.vertices, mids]), tris, crs=mesh.crs)
    m = len(edges)
    rows = np.concatenate([np.arange(n), n + np.repeat(np.arange(m), 2)])
    cols = np.concatenate([np.arange(n), edges.ravel()])
    vals = np.concatenate([np.ones(n), np.full(2 * m, 0.5)])
    P = sp.csr_matrix((vals, (rows, cols)), shape=(n + m, n))
    return fine, P


def _check_polygon(poly, name):
    from shapely.geometry import Polygon

    p = np.asarray(poly, dtype=float)
    if p.ndim != 2 or p.shape[1] != 2 or len(p) < 3:
        raise MeshError(f"{name}: need at least 3 vertices with 2 coordinates")
    if np.allclose(p[0], p[-1]) and len(p) > 3:
        p = p[:-1]
    if np.any(np.linalg.norm(np.diff(np.vstack([p, p[:1]]), axis=0), axis=1) <= VERTEX_TOL):
        raise MeshError(f"{name}: repeated consecutive vertices")
    if polygon_area(p) <= VERTEX_TOL:
        raise MeshError(f"{name}: degenerate (collinear or zero-area) polygon")
    shape = Polygon(p)
    if not shape.is_valid:
        from shapely.validation import explain_validity

        raise MeshError(f"{name}: polygon is not simple ({explain_validity(shape)})")
    # counter-clockwise
    x, y = p[:, 0], p[:, 1]
    if np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)) < 0:
        p = p[::-1]
    return p, shape


def _densify(p, h):
    out = []
    for a, b in zip(p, np.roll(p, -1, axis=0)):
        k = max(1, int(math.ceil(np.linalg.norm(b - a) / h - 1e-12)))
        s = np.arange(k)[:, None] / k
        out.append(a + s * (b - a))
    return np.vstack(out)


def build_mesh(
    boundary,
    max_edge: float,
    inner_region=None,
    inner_max_edge: float | None = None,
    min_angle: float = 21.0,
    crs: str = "planar km",
    max_rounds: int = 60,
) -> TriMesh:
    """Constrained quality triangulation of a simple polygon.

    Every edge is at most ``max_edge``; inside the optional ``inner_region``
    (which must lie within ``boundary``) edges are at most ``inner_max_edge``.
    """
    import triangle

    if not max_edge > 0:
        raise MeshError("max_edge must be positive")
    outer, outer_shape = _check_polygon(boundary, "boundary")
    verts = [_densify(outer, max_edge)]
    inner_shape = None
    h_in = max_edge
    if inner_region is not None:
        h_in = inner_max_edge if inner_max_edge is not None else max_edge
        if not h_in > 0:
            raise MeshError("inner_max_edge must be positive")
        inner, inner_shape = _check_polygon(inner_region, "inner_region")
        if not outer_shape.buffer(1e-9).contains(inner_shape):
            raise MeshError("inner_region must lie inside the boundary")
        verts.append(_densify(inner, min(h_in, max_edge)))
    segs, offset = [], 0
    for ring in verts:
        k = len(ring)
        idx = np.arange(k) + offset
        segs.append(np.column_stack([idx, np.roll(idx, -1)]))
        offset += k
    area_of = lambda h: math.sqrt(3.0) / 4.0 * h * h  # noqa: E731
    pslg = dict(vertices=np.vstack(verts), segments=np.vstack(segs))
    opts = f"pq{min_angle:g}"
    if inner_shape is not None:
        outer_pt = outer_shape.difference(inner_shape).representative_point()
        inner_pt = inner_shape.representative_point()
        pslg["regions"] = np.array(
            [
                [outer_pt.x, outer_pt.y, 1.0, area_of(max_edge)],
                [inner_pt.x, inner_pt.y, 2.0, area_of(h_in)],
            ]
        )
        res = triangle.triangulate(pslg, opts + "aA")
    else:
        res = triangle.triangulate(pslg, opts + f"a{area_of(max_edge):.17g}")
    for _ in range(max_rounds):
        v, t = res["vertices"], res["triangles"]
        limit = np.full(len(t), max_edge)
        if inner_shape is not None:
            limit[res["triangle_attributes"].ravel() == 2.0] = h_in
        ev = np.stack([v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 1]], v[t[:, 0]] - v[t[:, 2]]], 1)
        longest = np.linalg.norm(ev, axis=2).max(axis=1)
        too_long = longest > limit * (1 + 1e-12)
        if not too_long.any():
            break
        areas = np.abs(_signed_areas(v, t))
        max_area = np.where(too_long, 0.5 * areas, -1.0)
        res = dict(res, triangle_max_area=max_area)
        res = triangle.triangulate(res, "r" + opts + "a" + ("A" if inner_shape is not None else ""))
    else:
        raise MeshError("edge-length refinement did not converge")
    return TriMesh(res["vertices"], res["triangles"], crs=crs)


def mesh_quality(mesh: TriMesh, bins: int = 10) -> dict:
    """Minimum angle, edge-length histogram and total area."""
    v, t = mesh.vertices, mesh.triangles
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def ang(p, q, r):
        u, w = q - p, r - p
        cosv = np.einsum("ij,ij->i", u, w) / (np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1))
        return np.degrees(np.arccos(np.clip(cosv, -1, 1)))

    angles = np.concatenate([ang(a, b, c), ang(b, c, a), ang(c, a, b)])
    lengths = mesh.edge_lengths()
    counts, edges = np.histogram(lengths, bins=bins)
    return {
        "n_vertices": mesh.n_vertices,
        "n_triangles": mesh.n_triangles,
        "area": mesh.area,
        "min_angle_deg": float(angles.min()),
        "max_edge": float(lengths.max()),
        "edge_hist_counts": counts.tolist(),
        "edge_hist_edges": edges.tolist(),
    }


def write_mesh(mesh: TriMesh, path, extra_header: dict | None = None) -> None:
    """Write the mesh as a sectioned text file with 17-significant-digit floats."""
    buf = io.StringIO()
    buf.write(f"# {MESH_FORMAT}\n")
    buf.write(f"# crs: {mesh.crs}\n")
    buf.write("# units: km\n")
    for k, val in (extra_header or {}).items():
        buf.write(f"# {k}: {val}\n")
    buf.write("[vertices]\nid,x,y\n")
    for i, (x, y) in enumerate(mesh.vertices):
        buf.write(f"{i},{x:.17g},{y:.17g}\n")
    buf.write("[triangles]\nid,v1,v2,v3\n")
    for i, (p, q, r) in enumerate(mesh.triangles):
        buf.write(f"{i},{p},{q},{r}\n")
    Path(path).write_text(buf.getvalue())


def read_mesh(path) -> TriMesh:
    crs = "planar km"
    section = None
    verts, tris = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line[1:].strip().startswith("crs:"):
                crs = line.split(":", 1)[1].strip()
            continue
        if line.startswith("["):
            section = line.strip("[]")
            continue
        if line.startswith("id,"):
            continue
        parts = line.split(",")
        if section == "vertices":
            verts.append((int(parts[0]), float(parts[1]), float(parts[2])))
        elif section == "triangles":
            tris.append(tuple(int(s) for s in parts))
        else:
            raise MeshError(f"unexpected line outside a section: {line!r}")
    if not verts or not tris:
        raise MeshError(f"{path}: missing vertex or triangle table")
    verts.sort()
    tris.sort()
    if [r[0] for r in verts] != list(range(len(verts))):
        raise MeshError(f"{path}: vertex ids must be 0..n-1")
    v = np.array([r[1:] for r in verts], dtype=float)
    t = np.array([r[1:] for r in tris], dtype=np.int64)
    return TriMesh(v, t, crs=crs)


def region_weights(mesh: TriMesh, region) -> np.ndarray:
    """Lumped vertex weights of a polygonal region: ``sum_T |T cap region| / 3``.

    ``region`` is a sequence of ``(x, y)`` or a shapely geometry. Raises
    :class:`OutsideDomainError` if the region extends beyond the mesh by
    more than a relative 1e-9 of its area.
    """
    from shapely.geometry import Polygon
    from shapely.geometry.base import BaseGeometry
    from shapely.strtree import STRtree

    geom = region if isinstance(region, BaseGeometry) else Polygon(np.asarray(region, dtype=float))
    if not geom.is_valid or geom.area <= 0:
        raise MeshError("region polygon is invalid or empty")
    tris = [Polygon(mesh.vertices[t]) for t in mesh.triangles]
    tree = STRtree(tris)
    w = np.zeros(mesh.n_vertices)
    covered = 0.0
    for k in tree.query(geom, predicate="intersects"):
        a = tris[k].intersection(geom).area
        covered += a
        np.add.at(w, mesh.triangles[k], a / 3.0)
    if covered < geom.area * (1 - 1e-9):
        raise OutsideDomainError(
            f"region extends outside the mesh domain ({geom.area - covered:.3g} km^2 uncovered)"
        )
    return w
