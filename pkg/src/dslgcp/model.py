"""Latent Gaussian model for thinned LGCP line-transect data.

The latent vector is laid out as ``[beta, w, beta_g]``: fixed effects
(intercept first when present), mesh-vertex weights of the spatial field
(absent when the field is switched off) and detection coefficients. The
linear predictor of the thinned intensity is

    log Lambda(s, t, z) = x(s, t)' beta + xi(s) + log g(z),

with ``log g(z) = -d(z)' beta_g``, so every evaluation is a row of a sparse
design matrix applied to the latent vector.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Protocol

import numpy as np
import scipy.sparse as sp

from .detection import DetectionModel, spline_prior_precision
from .integration import IntegrationScheme, Transect, polyline_distance, polyline_project
from .linalg import SparseCholesky
from .mesh import TriMesh, assemble_fem, basis_matrix, locate_many
from .spde import SpdePrior, default_prior, link, log_prior, precision

__all__ = [
    "SpecError",
    "DataError",
    "CovariateField",
    "CenteredCovariate",
    "ModelSpec",
    "SurveyData",
    "Detections",
    "LatentLayout",
    "center_covariate",
    "centered_fields",
    "coordinate_covariates",
    "log_intensity",
    "loglik",
    "loglik_gradient_hessian",
    "Likelihood",
    "PointProcessLikelihood",
    "validate_survey",
    "detection_sites",
    "recommended_R",
]

INTERCEPT = "intercept"
DISTANCE_TOLERANCE_KM = 1e-3


class SpecError(ValueError):
    """Inconsistent model specification."""


class DataError(ValueError):
    """Survey data violate the model's assumptions."""


@dataclass(frozen=True, eq=False)
class CovariateField:
    """Covariate values at mesh vertices, one column per year."""

    name: str
    values: np.ndarray
    years: tuple

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = np.repeat(v[:, None], len(self.years), axis=1)
        if v.ndim != 2 or v.shape[1] != len(self.years):
            raise SpecError(f"covariate {self.name}: values must be (n_vertices, {len(self.years)})")
        if not np.all(np.isfinite(v)):
            raise DataError(f"covariate {self.name}: non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "years", tuple(self.years))

    def columns(self, years) -> np.ndarray:
        """Values for the requested year labels, in that order."""
        idx = {y: i for i, y in enumerate(self.years)}
        missing = [y for y in years if y not in idx]
        if missing:
            raise DataError(f"covariate {self.name}: no values for years {missing}")
        return self.values[:, [idx[y] for y in years]]


def coordinate_covariates(mesh: TriMesh, years) -> dict:
    """The vertex coordinates as time-constant covariates ``x`` and ``y``."""
    years = tuple(years)
    return {
        "x": CovariateField("x", mesh.vertices[:, 0], years),
        "y": CovariateField("y", mesh.vertices[:, 1], years),
    }


# ---------------------------------------------------------------- centering


@dataclass(frozen=True, eq=False)
class CenteredCovariate:
    """Hierarchical centering of a space-time covariate.

    ``cov = overall + yearly[t] + spatial[s] + residual[s, t]`` exactly, and
    ``within_year = cov - yearly[t] - overall = spatial + residual``.
    """

    name: str
    years: tuple
    overall: float
    yearly: np.ndarray
    spatial: np.ndarray
    residual: np.ndarray
    within_year: np.ndarray


def center_covariate(cov: CovariateField, mesh: TriMesh, weights=None, years=None) -> CenteredCovariate:
    """Split a covariate into overall, yearly, spatial and residual parts.

    Spatial averages use the vertex ``weights`` (lumped mass of the whole
    mesh by default, or region weights for a survey area); time averages
    give each year equal weight.
    """
    if years is None:
        years = cov.years
    years = tuple(years)
    X = cov.columns(years)
    if weights is None:
        weights = assemble_fem(mesh).mass_lumped
    w = np.asarray(weights, dtype=float)
    if w.shape != (mesh.n_vertices,) or np.any(w < 0) or w.sum() <= 0:
        raise SpecError("spatial weights must be non-negative with positive sum, one per vertex")
    w = w / w.sum()
    space_mean = w @ X  # per year
    overall = float(space_mean.mean())
    yearly = space_mean - overall
    spatial = X.mean(axis=1) - overall
    residual = X - yearly[None, :] - spatial[:, None] - overall
    within = X - yearly[None, :] - overall
    return CenteredCovariate(cov.name, years, overall, yearly, spatial, residual, within)


def centered_fields(c: CenteredCovariate, scheme: str) -> dict:
    """Covariate fields for a centering scheme.

    ``"none"`` returns the raw covariate, ``"within-year"`` the pair
    ``{name}_t`` and ``{name}_cwy``, and ``"space-time"`` the triple
    ``{name}_t``, ``{name}_s`` and ``{name}_res``.
    """
    n, T = c.residual.shape
    yr = CovariateField(f"{c.name}_t", np.repeat(c.yearly[None, :], n, axis=0), c.years)
    if scheme == "none":
        raw = c.overall + c.yearly[None, :] + c.within_year
        return {c.name: CovariateField(c.name, raw, c.years)}
    if scheme == "within-year":
        return {yr.name: yr, f"{c.name}_cwy": CovariateField(f"{c.name}_cwy", c.within_year, c.years)}
    if scheme == "space-time":
        return {
            yr.name: yr,
            f"{c.name}_s": CovariateField(f"{c.name}_s", c.spatial, c.years),
            f"{c.name}_res": CovariateField(f"{c.name}_res", c.residual, c.years),
        }
    raise SpecError(f"unknown centering scheme {scheme!r}; use none, within-year or space-time")


# ------------------------------------------------------------- specification


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Fixed effects, spatial field and detection model.

    Parameters
    ----------
    mesh : TriMesh
    detection : DetectionModel
        Structural template; its coefficients, if any, are ignored.
    covariates : dict of CovariateField
    fixed_effects : sequence of str
        Covariate names entering ``x(s, t)``, in order.
    intercept : bool
    field : bool
        Include the SPDE field ``xi``.
    spde_prior : SpdePrior, optional
        Defaults to :func:`dslgcp.spde.default_prior` of the mesh.
    beta_prec : float
        Prior precision of each fixed effect.
    beta_g_prec : float, optional
        Prior precision of the half-normal coefficient. The default puts a
        N(0, 1000) prior on ``log g(z_max)``.
    var_log_gamma : float
        Prior variance of ``theta3 = log(gamma / gamma0)`` for the spline
        detection model, where ``gamma0`` gives the roughness precision unit
        mean diagonal.
    detection_site : {"midline", "observed"}
        Where ``x' beta + xi`` enters the detection term: at the foot of the
        perpendicular on the transect (consistent with the midline
        evaluation of the integral) or at the recorded location.
    """

    mesh: TriMesh
    detection: DetectionModel
    covariates: dict = field(default_factory=dict)
    fixed_effects: tuple = ()
    intercept: bool = True
    field: bool = True
    spde_prior: SpdePrior | None = None
    beta_prec: float = 1e-3
    beta_g_prec: float | None = None
    var_log_gamma: float = 10.0
    detection_site: str = "midline"

    def __post_init__(self):
        object.__setattr__(self, "fixed_effects", tuple(self.fixed_effects))
        missing = [n for n in self.fixed_effects if n not in self.covariates]
        if missing:
            raise SpecError(f"unknown covariate(s) {missing}; available: {sorted(self.covariates)}")
        if len(set(self.fixed_effects)) != len(self.fixed_effects):
            raise SpecError("duplicate fixed effects")
        for n in self.fixed_effects:
            if self.covariates[n].values.shape[0] != self.mesh.n_vertices:
                raise SpecError(f"covariate {n}: wrong number of vertices")
        if self.spde_prior is None:
            object.__setattr__(self, "spde_prior", default_prior(self.mesh))
        if self.detection_site not in ("midline", "observed"):
            raise SpecError(f"detection_site must be 'midline' or 'observed', got {self.detection_site!r}")
        if not self.beta_prec > 0:
            raise SpecError("beta_prec must be positive")
        if self.beta_g_prec is None:
            zm = self.detection.z_max
            object.__setattr__(self, "beta_g_prec", 1e-3 * (0.5 * zm * zm) ** 2)

    @cached_property
    def fem(self):
        return assemble_fem(self.mesh)

    @cached_property
    def layout(self) -> "LatentLayout":
        names = ((INTERCEPT,) if self.intercept else ()) + self.fixed_effects
        return LatentLayout(names, self.mesh.n_vertices if self.field else 0, self.detection.n_coef)

    @property
    def n_theta(self) -> int:
        return (2 if self.field else 0) + (1 if self.detection.kind == "spline" else 0)

    @property
    def theta_names(self) -> tuple:
        return (("theta1", "theta2") if self.field else ()) + (
            ("theta3",) if self.detection.kind == "spline" else ()
        )

    def theta_prior_sd(self) -> np.ndarray:
        sd = []
        if self.field:
            sd += [math.sqrt(self.spde_prior.var_log_sigma), math.sqrt(self.spde_prior.var_log_rho)]
        if self.detection.kind == "spline":
            sd.append(math.sqrt(self.var_log_gamma))
        return np.array(sd)

    @cached_property
    def _gamma0(self) -> float:
        if self.detection.kind != "spline":
            return 1.0
        return 1.0 / math.sqrt(np.mean(np.diag(self.detection.basis.roughness())))

    def gamma(self, theta) -> float | None:
        if self.detection.kind != "spline":
            return None
        return self._gamma0 * math.exp(float(np.asarray(theta)[-1]))

    def log_prior_theta(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_theta,):
            raise SpecError(f"expected {self.n_theta} hyperparameters, got {theta.shape}")
        out = 0.0
        if self.field:
            out += log_prior(theta[0], theta[1], self.spde_prior)
        if self.detection.kind == "spline":
            v = self.var_log_gamma
            out += -0.5 * math.log(2 * math.pi * v) - 0.5 * theta[-1] ** 2 / v
        return out

    def prior_precision(self, theta) -> sp.csc_matrix:
        """Block-diagonal prior precision of the latent vector given ``theta``."""
        theta = np.asarray(theta, dtype=float)
        lay = self.layout
        blocks = [sp.identity(lay.n_beta) * self.beta_prec] if lay.n_beta else []
        if self.field:
            blocks.append(precision(self.fem, link(theta[0], theta[1], self.spde_prior)).Q)
        if self.detection.kind == "spline":
            blocks.append(sp.csc_matrix(spline_prior_precision(self.detection.basis, self.gamma(theta))))
        else:
            blocks.append(sp.identity(1) * self.beta_g_prec)
        return sp.block_diag(blocks, format="csc")

    def log_prior_latent(self, x, theta, Q=None) -> float:
        """Normalized Gaussian log density of the latent vector."""
        if Q is None:
            Q = self.prior_precision(theta)
        x = np.asarray(x, dtype=float)
        ld = SparseCholesky(Q).logdet()
        return float(0.5 * ld - 0.5 * len(x) * math.log(2 * math.pi) - 0.5 * x @ (Q @ x))


@dataclass(frozen=True)
class LatentLayout:
    beta_names: tuple
    n_field: int
    n_detect: int

    @property
    def n_beta(self) -> int:
        return len(self.beta_names)

    @property
    def n(self) -> int:
        return self.n_beta + self.n_field + self.n_detect

    @property
    def beta(self) -> slice:
        return slice(0, self.n_beta)

    @property
    def field(self) -> slice:
        return slice(self.n_beta, self.n_beta + self.n_field)

    @property
    def detect(self) -> slice:
        return slice(self.n_beta + self.n_field, self.n)

    def component_names(self) -> list[str]:
        return (
            list(self.beta_names)
            + [f"w[{i}]" for i in range(self.n_field)]
            + [f"beta_g[{i}]" for i in range(self.n_detect)]
        )

    def pack(self, beta=(), w=None, beta_g=()) -> np.ndarray:
        x = np.zeros(self.n)
        x[self.beta] = beta
        if self.n_field and w is not None:
            x[self.field] = w
        x[self.detect] = beta_g
        return x


# ---------------------------------------------------------------- survey data


@dataclass(frozen=True, eq=False)
class Detections:
    id: np.ndarray
    xy: np.ndarray
    year: np.ndarray
    transect_id: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        n = len(xy)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float).reshape(n))
        for name in ("id", "year", "transect_id"):
            arr = np.asarray(getattr(self, name), dtype=object).reshape(n)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.xy)

    @classmethod
    def empty(cls) -> "Detections":
        return cls([], np.zeros((0, 2)), [], [], [])

    def subset(self, idx) -> "Detections":
        return Detections(self.id[idx], self.xy[idx], self.year[idx], self.transect_id[idx], self.z[idx])


@dataclass(frozen=True, eq=False)
class SurveyData:
    transects: tuple
    detections: Detections

    def __post_init__(self):
        object.__setattr__(self, "transects", tuple(self.transects))
        ids = [t.id for t in self.transects]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate transect ids")

    @property
    def years(self) -> tuple:
        return tuple(sorted({t.year for t in self.transects}))

    def transect(self, tid) -> Transect:
        for t in self.transects:
            if t.id == tid:
                return t
        raise DataError(f"unknown transect {tid!r}")


def validate_survey(mesh: TriMesh, data: SurveyData, recompute: bool = True) -> list:
    """Check detections against their transects.

    Raises :class:`DataError` for a detection outside the mesh, with a year
    differing from its transect's, or with ``|z|`` beyond the half-width.
    With ``recompute`` the distance is recomputed from geometry and
    detections disagreeing by more than 1 m are returned (and warned about).
    """
    det = data.detections
    if len(det) == 0:
        return []
    tri, _ = locate_many(mesh, det.xy)
    if np.any(tri < 0):
        k = int(np.flatnonzero(tri < 0)[0])
        raise DataError(f"detection {det.id[k]} at {det.xy[k].tolist()} lies outside the mesh")
    by_id = {t.id: t for t in data.transects}
    offenders = []
    for k in range(len(det)):
        tid = det.transect_id[k]
        if tid not in by_id:
            raise DataError(f"detection {det.id[k]}: unknown transect {tid!r}")
        tr = by_id[tid]
        if det.year[k] != tr.year:
            raise DataError(f"detection {det.id[k]}: year {det.year[k]!r} differs from transect year {tr.year!r}")
        if abs(det.z[k]) > tr.half_width * (1 + 1e-12):
            raise DataError(
                f"detection {det.id[k]}: distance {det.z[k]} exceeds half-width {tr.half_width} of {tid!r}"
            )
        if recompute:
            d = float(polyline_distance(det.xy[k], tr.waypoints)[0])
            if abs(d - abs(det.z[k])) > DISTANCE_TOLERANCE_KM:
                offenders.append((det.id[k], float(det.z[k]), d))
    if offenders:
        shown = ", ".join(f"{i} (given {a:.4g}, geometry {b:.4g})" for i, a, b in offenders[:10])
        warnings.warn(f"{len(offenders)} detection distance(s) differ from geometry by > 1 m: {shown}", stacklevel=2)
    return offenders


# ----------------------------------------------------------------- likelihood


class Likelihood(Protocol):
    """Log-likelihood as a function of the latent vector."""

    n: int

    def value(self, x) -> float: ...

    def gradient(self, x) -> np.ndarray: ...

    def hessian(self, x) -> sp.spmatrix: ...


def _covariate_rows(spec: ModelSpec, sites: sp.spmatrix, year_idx, years) -> np.ndarray:
    """Fixed-effect design at interpolation rows ``sites`` for years ``year_idx``."""
    cols = []
    n = sites.shape[0]
    if spec.intercept:
        cols.append(np.ones(n))
    for name in spec.fixed_effects:
        F = sites @ spec.covariates[name].columns(years)
        cols.append(F[np.arange(n), year_idx])
    return np.column_stack(cols) if cols else np.zeros((n, 0))


class PointProcessLikelihood:
    """Thinned Poisson likelihood with the vertex-accumulated integral.

    ``loglik(x) = sum_i eta_i(x) - sum_e wbar_e exp(eta_e(x)) + sum_k |C_k|``
    where both ``eta`` vectors are sparse linear maps of the latent vector.
    """

    def __init__(self, spec: ModelSpec, data: SurveyData, scheme: IntegrationScheme):
        lay = spec.layout
        years = scheme.years
        zm = spec.detection.z_max
        for t in data.transects:
            if abs(t.half_width - zm) > 1e-9 * zm:
                raise DataError(f"transect {t.id}: half-width {t.half_width} differs from detection z_max {zm}")
        if set(scheme.transect_ids) != {t.id for t in data.transects}:
            raise DataError("integration scheme was built from different transects")
        yidx = {y: i for i, y in enumerate(years)}
        det = data.detections
        for y in set(det.year.tolist()):
            if y not in yidx:
                raise DataError(f"detection year {y!r} has no surveyed transect")
        if spec.detection.kind == "spline":
            n_nodes = len(np.unique(np.round(np.abs(scheme.z) / zm, 9)))
            if scheme.n_entries and n_nodes < 2 * lay.n_detect:
                raise SpecError(
                    f"spline detection with {lay.n_detect} weights needs at least {2 * lay.n_detect} distinct "
                    f"distance nodes, the scheme has {n_nodes}; build it with R >= {recommended_R(spec.detection)}"
                )
        self.spec = spec
        self.n = lay.n
        # detections
        B = basis_matrix(spec.mesh, detection_sites(spec, data)) if len(det) else sp.csr_matrix((0, spec.mesh.n_vertices))
        dy = np.array([yidx[y] for y in det.year], dtype=int)
        blocks = [sp.csr_matrix(_covariate_rows(spec, B, dy, years))]
        if spec.field:
            blocks.append(B)
        blocks.append(sp.csr_matrix(-spec.detection.design(np.abs(det.z)) if len(det) else np.zeros((0, lay.n_detect))))
        self.A_obs = sp.hstack(blocks, format="csr")
        # integration entries
        E = scheme.entry_matrix()
        blocks = [sp.csr_matrix(_covariate_rows(spec, E, scheme.year, years))]
        if spec.field:
            blocks.append(E)
        blocks.append(sp.csr_matrix(-spec.detection.design(np.abs(scheme.z))))
        self.A_int = sp.hstack(blocks, format="csr")
        self.weights = scheme.weight.copy()
        self.const = scheme.surveyed_area
        self.obs_sum = np.asarray(self.A_obs.sum(axis=0)).ravel()

    def _integrand(self, x):
        with np.errstate(over="ignore"):
            return self.weights * np.exp(self.A_int @ x)

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(self.obs_sum @ x - self._integrand(x).sum() + self.const)

    def gradient(self, x) -> np.ndarray:
        return self.obs_sum - self.A_int.T @ self._integrand(x)

    def hessian(self, x) -> sp.csc_matrix:
        r = self._integrand(x)
        return -(self.A_int.T @ sp.diags(r) @ self.A_int).tocsc()

    def value_grad_hess(self, x):
        x = np.asarray(x, dtype=float)
        r = self._integrand(x)
        val = float(self.obs_sum @ x - r.sum() + self.const)
        grad = self.obs_sum - self.A_int.T @ r
        H = -(self.A_int.T @ sp.diags(r) @ self.A_int).tocsc()
        return val, grad, H

    def expected_count(self, x) -> float:
        return float(self._integrand(x).sum())


def recommended_R(detection: DetectionModel) -> int:
    """Distance-node count for a detection model.

    The half-normal shape is fixed and 5 nodes suffice. A spline with ``p``
    weights needs at least ``2 p`` distinct ``|z|`` nodes, otherwise its
    weights can push ``g`` above 1 between nodes without any cost in the
    integral and the likelihood is unbounded.
    """
    return 5 if detection.kind == "half_normal" else 4 * detection.n_coef + 1


def detection_sites(spec: ModelSpec, data: SurveyData) -> np.ndarray:
    """Locations at which the detection term evaluates ``x' beta + xi``."""
    det = data.detections
    if spec.detection_site == "observed" or len(det) == 0:
        return det.xy
    by_id = {t.id: t for t in data.transects}
    out = np.empty_like(det.xy)
    for tid in set(det.transect_id.tolist()):
        rows = np.flatnonzero(det.transect_id == tid)
        out[rows] = polyline_project(det.xy[rows], by_id[tid].waypoints)
    return out


def log_intensity(spec: ModelSpec, latent, location, year, z=None) -> float:
    """``x(s, t)' beta + xi(s)``, plus ``log g(z)`` when a distance is given."""
    lay = spec.layout
    x = np.asarray(latent, dtype=float)
    if x.shape != (lay.n,):
        raise SpecError(f"latent vector must have length {lay.n}")
    B = basis_matrix(spec.mesh, np.asarray(location, dtype=float).reshape(1, 2))
    years = [year]
    row = _covariate_rows(spec, B, np.array([0]), years)[0]
    out = float(row @ x[lay.beta])
    if spec.field:
        out += float((B @ x[lay.field])[0])
    if z is not None:
        out -= float(spec.detection.design(abs(z))[0] @ x[lay.detect])
    return out


def loglik(spec: ModelSpec, latent, data: SurveyData, scheme: IntegrationScheme) -> float:
    return PointProcessLikelihood(spec, data, scheme).value(latent)


def loglik_gradient_hessian(spec: ModelSpec, latent, data: SurveyData, scheme: IntegrationScheme):
    """Gradient vector and sparse Hessian of :func:`loglik`."""
    _, g, H = PointProcessLikelihood(spec, data, scheme).value_grad_hess(latent)
    return g, H
