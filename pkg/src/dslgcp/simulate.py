"""Simulation from the thinned log-Gaussian Cox process.

Points are drawn triangle by triangle from the intensity whose logarithm
is the linear interpolant of mesh-vertex values, then thinned by transect
strips and a detection function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .detection import DetectionModel, detect_prob
from .integration import build_scheme, integral, strip_distance
from .mesh import TriMesh, assemble_fem
from .model import Detections, SpecError, SurveyData
from .spde import SQRT8, precision, sample_gmrf

__all__ = [
    "TruthConfig",
    "TruthRecord",
    "triangle_integral_exp",
    "sample_points",
    "thin_by_survey",
    "simulate_survey",
]

# Degree-5 seven-point rule on the reference triangle (barycentric, weights sum to 1)
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
_Q7_BARY = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_A1, _B1, _B1],
        [_B1, _A1, _B1],
        [_B1, _B1, _A1],
        [_A2, _B2, _B2],
        [_B2, _A2, _B2],
        [_B2, _B2, _A2],
    ]
)
_Q7_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)


def triangle_integral_exp(mesh: TriMesh, log_lambda) -> np.ndarray:
    """Per-triangle integral of ``exp`` of the linear interpolant, by the 7-point rule."""
    L = np.asarray(log_lambda, dtype=float)[mesh.triangles]  # (n_tri, 3)
    vals = np.exp(L @ _Q7_BARY.T)  # (n_tri, 7)
    return mesh.areas * (vals @ _Q7_W)


def _uniform_in_triangles(rng, corners, n):
    """``n[k]`` uniform points in triangle k; ``corners`` has shape (n_tri, 3, 2)."""
    tri = np.repeat(np.arange(len(corners)), n)
    r1 = np.sqrt(rng.random(len(tri)))
    r2 = rng.random(len(tri))
    bc = np.column_stack([1 - r1, r1 * (1 - r2), r1 * r2])
    pts = np.einsum("ki,kid->kd", bc, corners[tri])
    return tri, bc, pts


def sample_points(mesh: TriMesh, log_lambda, seed=None, max_points: float = 1e7) -> np.ndarray:
    """Draw a Poisson process with intensity ``exp`` of the P1 interpolant of ``log_lambda``.

    Counts per triangle are Poisson with the 7-point quadrature mean; the
    locations follow by rejection against the largest vertex intensity.
    Raises :class:`SpecError` when the expected count exceeds ``max_points``,
    which usually means a covariate effect on the wrong scale.
    """
    rng = np.random.default_rng(seed)
    L = np.asarray(log_lambda, dtype=float)
    if L.shape != (mesh.n_vertices,) or not np.all(np.isfinite(L)):
        raise ValueError("log_lambda must hold one finite value per vertex")
    mean = triangle_integral_exp(mesh, L)
    if mean.sum() > max_points:
        raise SpecError(f"expected {mean.sum():.3g} points exceeds {max_points:.3g}; check the intensity scale")
    counts = rng.poisson(mean)
    corners = mesh.vertices[mesh.triangles]
    Lt = L[mesh.triangles]
    Lmax = Lt.max(axis=1)
    need = counts.copy()
    chunks = []
    while need.sum() > 0:
        # oversample by the acceptance-rate estimate, capped to bound memory
        tri, bc, pts = _uniform_in_triangles(rng, corners, need)
        acc = rng.random(len(tri)) < np.exp(np.einsum("ki,ki->k", bc, Lt[tri]) - Lmax[tri])
        tri, pts = tri[acc], pts[acc]
        # keep at most need[k] accepted points per triangle, in draw order
        order = np.argsort(tri, kind="stable")
        tri, pts = tri[order], pts[order]
        start = np.searchsorted(tri, np.arange(len(need)))
        rank = np.arange(len(tri)) - start[tri]
        keep = rank < need[tri]
        chunks.append((tri[keep], pts[keep]))
        need -= np.bincount(tri[keep], minlength=len(need))
    if not chunks:
        return np.zeros((0, 2))
    tri = np.concatenate([c[0] for c in chunks])
    pts = np.concatenate([c[1] for c in chunks])
    return pts[np.argsort(tri, kind="stable")]


def thin_by_survey(points, transects, detection, seed=None, return_overlap: bool = False):
    """Observe points through transect strips and a detection function.

    Parameters
    ----------
    points : array (n, 2) or dict year -> array
        A plain array is offered to every transect regardless of year.
    transects : sequence of Transect
    detection : DetectionModel or callable
        A callable maps distances to detection probabilities.

    A point belongs to the strip of the nearest transect piece (perpendicular
    distance with the foot on the piece); ties go to the transect listed
    first. It is then retained with probability ``g(z)``.
    """
    rng = np.random.default_rng(seed)
    transects = list(transects)
    if isinstance(points, dict):
        by_year = {y: np.asarray(p, dtype=float).reshape(-1, 2) for y, p in points.items()}
    else:
        arr = np.asarray(points, dtype=float).reshape(-1, 2)
        by_year = {y: arr for y in {t.year for t in transects}}
    gfun = (lambda z: detect_prob(detection, z)) if isinstance(detection, DetectionModel) else detection
    ids, xy, yrs, tids, zs = [], [], [], [], []
    n_in = n_multi = 0
    for y in sorted(by_year, key=str):
        P = by_year[y]
        trs = [t for t in transects if t.year == y]
        if not trs or not len(P):
            continue
        D = np.column_stack([strip_distance(P, t.waypoints) for t in trs])
        hw = np.array([t.half_width for t in trs])
        inside = D <= hw[None, :]
        D = np.where(inside, D, np.inf)
        hit = inside.any(axis=1)
        n_in += int(hit.sum())
        n_multi += int((inside.sum(axis=1) > 1).sum())
        k = np.argmin(D, axis=1)  # first minimum, i.e. lower listed transect
        rows = np.flatnonzero(hit)
        if not len(rows):
            continue
        z = D[rows, k[rows]]
        u = rng.random(len(rows))
        keep = u < np.asarray(gfun(z), dtype=float).reshape(-1)
        for r, kk, zz in zip(rows[keep], k[rows][keep], z[keep]):
            xy.append(P[r])
            yrs.append(y)
            tids.append(trs[kk].id)
            zs.append(zz)
    ids = [f"d{i:05d}" for i in range(len(xy))]
    det = Detections(ids, np.array(xy).reshape(-1, 2), yrs, tids, zs)
    if return_overlap:
        return det, (n_multi / n_in if n_in else 0.0)
    return det


@dataclass(frozen=True, eq=False)
class TruthConfig:
    """Generating values for a simulated survey.

    ``beta`` maps fixed-effect names (``"intercept"`` and covariate names)
    to values. ``field`` is ``(sigma, rho)`` of the Matérn field or ``None``.
    ``detection`` must carry coefficients.
    """

    mesh: TriMesh
    transects: tuple
    detection: DetectionModel
    beta: dict
    covariates: dict = field(default_factory=dict)
    field: tuple | None = None
    seed: int = 0
    years: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "transects", tuple(self.transects))
        if self.detection.coef is None:
            raise ValueError("truth detection model needs coefficients")
        for k, v in self.beta.items():
            if not np.isfinite(v):
                raise ValueError(f"beta[{k}] is not finite")
            if k != "intercept" and k not in self.covariates:
                raise ValueError(f"no covariate named {k!r}")
        if self.field is not None:
            s, r = self.field
            if not (s > 0 and r > 0):
                raise ValueError("field sigma and rho must be positive")
        if self.years is None:
            object.__setattr__(self, "years", tuple(sorted({t.year for t in self.transects})))


@dataclass(frozen=True, eq=False)
class TruthRecord:
    beta: dict
    field_params: tuple | None
    field: np.ndarray
    detection_coef: np.ndarray
    log_lambda: np.ndarray  # (n_vertices, n_years)
    years: tuple
    n_points: dict
    expected_detections: float
    overlap_fraction: float
    seed: int

    def as_text(self) -> str:
        lines = [f"seed = {self.seed}", f"years = {', '.join(map(str, self.years))}"]
        for k, v in self.beta.items():
            lines.append(f"beta.{k} = {v!r}")
        if self.field_params is not None:
            lines.append(f"field.sigma = {self.field_params[0]!r}")
            lines.append(f"field.rho = {self.field_params[1]!r}")
        lines.append("detection.coef = " + ", ".join(repr(float(c)) for c in self.detection_coef))
        for y in self.years:
            lines.append(f"points.{y} = {self.n_points[y]}")
        lines.append(f"expected_detections = {self.expected_detections!r}")
        lines.append(f"overlap_fraction = {self.overlap_fraction!r}")
        return "\n".join(lines) + "\n"


def truth_log_lambda(truth: TruthConfig, w=None) -> np.ndarray:
    m = truth.mesh.n_vertices
    L = np.zeros((m, len(truth.years)))
    for k, b in truth.beta.items():
        if k == "intercept":
            L += b
        else:
            L += b * truth.covariates[k].columns(truth.years)
    if w is not None:
        L += w[:, None]
    return L


def simulate_survey(truth: TruthConfig, R: int = 5):
    """Simulate detections; returns ``(SurveyData, TruthRecord)``.

    Independent streams for the field, each year's points and the thinning
    are spawned from ``truth.seed``, so output is reproducible.
    """
    ss = np.random.SeedSequence(truth.seed)
    s_field, s_thin, *s_years = ss.spawn(2 + len(truth.years))
    mesh = truth.mesh
    w = np.zeros(mesh.n_vertices)
    if truth.field is not None:
        sigma, rho = truth.field
        kappa = SQRT8 / rho
        tau = 1.0 / math.sqrt(4 * math.pi * kappa**2 * sigma**2)
        Q = precision(assemble_fem(mesh), tau=tau, kappa=kappa)
        w = sample_gmrf(Q, seed=s_field)
    L = truth_log_lambda(truth, w if truth.field is not None else None)
    pts = {y: sample_points(mesh, L[:, j], seed=s_years[j]) for j, y in enumerate(truth.years)}
    det, overlap = thin_by_survey(pts, truth.transects, truth.detection, seed=s_thin, return_overlap=True)
    expected = 0.0
    if truth.transects:
        scheme = build_scheme(mesh, truth.transects, R=R, years=truth.years)
        expected = integral(scheme, L, truth.detection)[1]
    rec = TruthRecord(
        dict(truth.beta), truth.field, w, truth.detection.coef.copy(), L, truth.years,
        {y: len(p) for y, p in pts.items()}, expected, overlap, truth.seed,
    )
    return SurveyData(truth.transects, det), rec
