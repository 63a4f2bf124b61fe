"""Quadrature over transect strips reduced to weighted mesh-vertex evaluations.

Each transect polyline is cut at triangle edges. A segment contributes its
length as the along-line weight at its midpoint, the strip's
perpendicular extent ``[-z_max, z_max]`` is covered by ``R`` equidistant
midpoint nodes, and the midpoint evaluation of the intensity is spread to
the three triangle vertices with the Barycentric weights. Entries sharing
vertex, year and distance node are summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .detection import DetectionModel, log_detect_prob
from .mesh import OutsideDomainError, TriMesh, locate_many, refine_uniform

__all__ = [
    "Transect",
    "Segment",
    "IntegrationScheme",
    "split_transect",
    "segment_points",
    "distance_nodes",
    "build_scheme",
    "integral",
    "strip_distance",
    "polyline_distance",
    "polyline_project",
    "SegmentPoints",
]


@dataclass(frozen=True, eq=False)
class Transect:
    id: str
    waypoints: np.ndarray
    year: object
    half_width: float

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float)
        if w.ndim != 2 or w.shape[1] != 2 or len(w) < 2:
            raise ValueError(f"transect {self.id}: need at least two 2-D waypoints")
        if np.any(np.linalg.norm(np.diff(w, axis=0), axis=1) == 0):
            raise ValueError(f"transect {self.id}: consecutive waypoints coincide")
        if not self.half_width > 0:
            raise ValueError(f"transect {self.id}: half_width must be positive")
        w.setflags(write=False)
        object.__setattr__(self, "waypoints", w)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1).sum())

    @property
    def strip_area(self) -> float:
        return 2.0 * self.half_width * self.length


@dataclass(frozen=True)
class Segment:
    triangle: int
    start: np.ndarray
    end: np.ndarray
    length: float
    midpoint: np.ndarray
    piece: int


def _crossings(mesh: TriMesh, a, b):
    """Parameters in (0, 1) where segment a->b crosses mesh edges."""
    e = mesh.edges
    p0 = mesh.vertices[e[:, 0]]
    p1 = mesh.vertices[e[:, 1]]
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    keep = np.all((np.maximum(p0, p1) >= lo - 1e-12) & (np.minimum(p0, p1) <= hi + 1e-12), axis=1)
    p0, p1 = p0[keep], p1[keep]
    d = b - a
    f = p1 - p0
    denom = d[0] * f[:, 1] - d[1] * f[:, 0]
    ok = np.abs(denom) > 1e-14 * np.linalg.norm(d) * np.linalg.norm(f, axis=1)
    r = p0[ok] - a
    t = (r[:, 0] * f[ok, 1] - r[:, 1] * f[ok, 0]) / denom[ok]
    s = (r[:, 0] * d[1] - r[:, 1] * d[0]) / denom[ok]
    hit = (s >= -1e-12) & (s <= 1 + 1e-12) & (t > 1e-12) & (t < 1 - 1e-12)
    return t[hit]


def split_transect(mesh: TriMesh, transect: Transect) -> list[Segment]:
    """Cut the polyline into pieces that each lie in a single triangle."""
    wp = transect.waypoints
    tri, _ = locate_many(mesh, wp)
    if np.any(tri < 0):
        k = int(np.flatnonzero(tri < 0)[0])
        raise OutsideDomainError(
            f"transect {transect.id}: waypoint {k} {wp[k].tolist()} lies outside the mesh domain"
        )
    segments: list[Segment] = []
    for piece, (a, b) in enumerate(zip(wp[:-1], wp[1:])):
        t = np.unique(np.concatenate([[0.0, 1.0], _crossings(mesh, a, b)]))
        t = t[np.r_[True, np.diff(t) > 1e-12]]
        t[-1] = 1.0
        L = float(np.linalg.norm(b - a))
        starts = a + t[:-1, None] * (b - a)
        ends = a + t[1:, None] * (b - a)
        mids = 0.5 * (starts + ends)
        mtri, _ = locate_many(mesh, mids)
        if np.any(mtri < 0):
            k = int(np.flatnonzero(mtri < 0)[0])
            raise OutsideDomainError(
                f"transect {transect.id}: leaves the mesh domain near {mids[k].tolist()}"
            )
        lengths = np.diff(t) * L
        for j in range(len(lengths)):
            segments.append(Segment(int(mtri[j]), starts[j], ends[j], float(lengths[j]), mids[j], piece))
    return segments


def distance_nodes(half_width: float, R: int) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint nodes on ``[-z_max, z_max]`` and their equal weights ``2 z_max / R``."""
    if R < 2:
        raise ValueError("R must be at least 2")
    h = 2.0 * half_width / R
    z = -half_width + (np.arange(R) + 0.5) * h
    return z, np.full(R, h)


def _fold(z, w):
    az = np.round(np.abs(z), 15)
    uz, inv = np.unique(az, return_inverse=True)
    return uz, np.bincount(inv, weights=w)


@dataclass(frozen=True)
class SegmentPoints:
    """Unaccumulated integration points: segment midpoints on the midline."""

    points: np.ndarray
    weights: np.ndarray  # along-line length
    transect: np.ndarray  # index into the transect list
    year: np.ndarray
    half_width: np.ndarray


def segment_points(mesh: TriMesh, transects) -> SegmentPoints:
    pts, wts, tid, yrs, hw = [], [], [], [], []
    for k, tr in enumerate(transects):
        for seg in split_transect(mesh, tr):
            pts.append(seg.midpoint)
            wts.append(seg.length)
            tid.append(k)
            yrs.append(tr.year)
            hw.append(tr.half_width)
    return SegmentPoints(
        np.array(pts).reshape(-1, 2), np.array(wts), np.array(tid, dtype=int),
        np.array(yrs, dtype=object), np.array(hw),
    )


@dataclass(frozen=True, eq=False)
class IntegrationScheme:
    """Weighted evaluation sites ``(vertex, year, |z|)``.

    ``vertex`` indexes the rows of ``prolongation``, which maps mesh-vertex
    values to evaluation sites (the identity unless triangles were
    subdivided).
    """

    vertex: np.ndarray
    year: np.ndarray
    z: np.ndarray
    weight: np.ndarray
    years: tuple
    prolongation: sp.csr_matrix
    transect_ids: tuple
    strip_area: np.ndarray
    segments: dict = field(default_factory=dict, repr=False)
    folded: bool = True

    @property
    def n_entries(self) -> int:
        return len(self.weight)

    @property
    def surveyed_area(self) -> float:
        return float(self.strip_area.sum())

    def entry_matrix(self) -> sp.csr_matrix:
        """``(n_entries, n_mesh_vertices)`` interpolation of vertex values to entries."""
        return self.prolongation[self.vertex]


def build_scheme(
    mesh: TriMesh,
    transects,
    R: int = 5,
    years=None,
    subdivide: bool = False,
    fold: bool = True,
) -> IntegrationScheme:
    """Build the vertex-accumulated quadrature for a set of transects.

    ``years`` fixes the ordered year labels (defaults to the sorted distinct
    transect years). ``subdivide`` splits every triangle into four before
    accumulation; ``fold`` merges the mirrored distance nodes ``+z`` and ``-z``.
    """
    transects = list(transects)
    if years is None:
        years = tuple(sorted({tr.year for tr in transects}))
    years = tuple(years)
    year_index = {y: i for i, y in enumerate(years)}
    for tr in transects:
        if tr.year not in year_index:
            raise ValueError(f"transect {tr.id}: year {tr.year!r} not among {years}")
    if subdivide:
        work, P = refine_uniform(mesh)
    else:
        work, P = mesh, sp.identity(mesh.n_vertices, format="csr")
    V, Y, Z, W = [], [], [], []
    seg_table = {}
    for tr in transects:
        segs = split_transect(work, tr)
        seg_table[tr.id] = segs
        if not segs:
            continue
        mids = np.array([s.midpoint for s in segs])
        lengths = np.array([s.length for s in segs])
        tri, bc = locate_many(work, mids)
        tri = np.array([s.triangle for s in segs]) if np.any(tri < 0) else tri
        zn, zw = distance_nodes(tr.half_width, R)
        if fold:
            zn, zw = _fold(zn, zw)
        verts = work.triangles[tri].ravel()
        along = (lengths[:, None] * bc).ravel()
        V.append(np.repeat(verts, len(zn)))
        Z.append(np.tile(zn, len(verts)))
        W.append(np.outer(along, zw).ravel())
        Y.append(np.full(len(verts) * len(zn), year_index[tr.year]))
    if V:
        V, Y, Z, W = (np.concatenate(x) for x in (V, Y, Z, W))
        keep = W > 0
        V, Y, Z, W = V[keep], Y[keep], Z[keep], W[keep]
        key = np.rec.fromarrays([V, Y, Z])
        uk, inv = np.unique(key, return_inverse=True)
        W = np.bincount(inv.ravel(), weights=W)
        V, Y, Z = uk.f0.astype(int), uk.f1.astype(int), uk.f2.astype(float)
    else:
        V = Y = np.zeros(0, dtype=int)
        Z = W = np.zeros(0)
    return IntegrationScheme(
        vertex=V, year=Y, z=Z, weight=W, years=years,
        prolongation=sp.csr_matrix(P),
        transect_ids=tuple(tr.id for tr in transects),
        strip_area=np.array([tr.strip_area for tr in transects]),
        segments=seg_table, folded=fold,
    )


def integral(scheme: IntegrationScheme, log_lambda, detection: DetectionModel | None = None):
    """Approximate ``sum_k int_{C_k} lambda g``.

    ``log_lambda`` holds mesh-vertex values, shape ``(n_vertices,)`` or
    ``(n_vertices, n_years)``. ``detection=None`` means ``g = 1``. Returns
    ``(per_year, total)``.
    """
    L = np.asarray(log_lambda, dtype=float)
    if L.ndim == 1:
        L = np.repeat(L[:, None], len(scheme.years), axis=1)
    site = scheme.prolongation @ L
    eta = site[scheme.vertex, scheme.year]
    if detection is not None:
        eta = eta + log_detect_prob(detection, np.abs(scheme.z))
    contrib = scheme.weight * np.exp(eta)
    per_year = np.bincount(scheme.year, weights=contrib, minlength=len(scheme.years))
    return per_year, float(per_year.sum())


def strip_distance(points, waypoints) -> np.ndarray:
    """Perpendicular distance to the nearest polyline piece whose foot lies on the piece.

    Points whose perpendicular foot falls outside every piece (beyond the
    ends, or in the wedge outside a bend) get ``inf``. This matches the
    union-of-rectangles strip used by the quadrature.
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    W = np.asarray(waypoints, dtype=float)
    best = np.full(len(P), np.inf)
    for a, b in zip(W[:-1], W[1:]):
        d = b - a
        L2 = d @ d
        s = ((P - a) @ d) / L2
        perp = np.abs((P[:, 0] - a[0]) * d[1] - (P[:, 1] - a[1]) * d[0]) / np.sqrt(L2)
        ok = (s >= 0.0) & (s <= 1.0)
        best = np.where(ok & (perp < best), perp, best)
    return best


def polyline_distance(points, waypoints) -> np.ndarray:
    """Euclidean distance to the polyline."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    W = np.asarray(waypoints, dtype=float)
    best = np.full(len(P), np.inf)
    for a, b in zip(W[:-1], W[1:]):
        d = b - a
        s = np.clip(((P - a) @ d) / (d @ d), 0.0, 1.0)
        best = np.minimum(best, np.linalg.norm(P - (a + s[:, None] * d), axis=1))
    return best


def polyline_project(points, waypoints) -> np.ndarray:
    """Closest point of the polyline to each point."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    W = np.asarray(waypoints, dtype=float)
    best = np.full(len(P), np.inf)
    out = np.empty_like(P)
    for a, b in zip(W[:-1], W[1:]):
        d = b - a
        s = np.clip(((P - a) @ d) / (d @ d), 0.0, 1.0)
        foot = a + s[:, None] * d
        dist = np.linalg.norm(P - foot, axis=1)
        better = dist < best
        out[better] = foot[better]
        best = np.where(better, dist, best)
    return out
