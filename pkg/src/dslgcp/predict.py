"""Sample-based posterior functionals of the intensity."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .inference import PosteriorFit, sample_latent
from .mesh import region_weights
from .model import ModelSpec

__all__ = [
    "SurfaceSummary",
    "AbundanceResult",
    "VarianceDecomposition",
    "vertex_design",
    "linear_predictor_parts",
    "intensity_surface",
    "rwpci",
    "rwpci_for_plot",
    "abundance",
    "variance_decomposition",
]

DEFAULT_SAMPLES = 2000
RHO_MIN_VARIANCE = 1e-12


def vertex_design(spec: ModelSpec, years) -> np.ndarray:
    """Fixed-effect design at mesh vertices: shape ``(n_years, n_vertices, n_beta)``."""
    m = spec.mesh.n_vertices
    out = np.zeros((len(years), m, spec.layout.n_beta))
    j = 0
    if spec.intercept:
        out[:, :, 0] = 1.0
        j = 1
    for name in spec.fixed_effects:
        out[:, :, j] = spec.covariates[name].columns(tuple(years)).T
        j += 1
    return out


def linear_predictor_parts(spec: ModelSpec, samples, years):
    """Fixed part ``(n, n_years, m)`` and field part ``(n, m)`` of ``eta`` per sample."""
    lay = spec.layout
    S = np.atleast_2d(samples)
    X = vertex_design(spec, years)
    fixed = np.einsum("tmb,nb->ntm", X, S[:, lay.beta])
    field = S[:, lay.field] if spec.field else np.zeros((len(S), spec.mesh.n_vertices))
    return fixed, field


def rwpci(q1, q2, q3):
    """Relative width of the posterior credible interval, ``(Q3 - Q1) / Q2``."""
    return (np.asarray(q3) - np.asarray(q1)) / np.asarray(q2)


def rwpci_for_plot(values, ceiling: float = 100.0):
    """Clip RWPCI values for map display; stored values stay uncapped."""
    return np.minimum(np.asarray(values, dtype=float), ceiling)


@dataclass(frozen=True, eq=False)
class SurfaceSummary:
    """Posterior summaries of ``lambda`` at mesh vertices; arrays are ``(n_vertices, n_years)``."""

    years: tuple
    median: np.ndarray
    q1: np.ndarray
    q3: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    n_samples: int

    @property
    def rwpci(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return rwpci(self.q1, self.median, self.q3)


def _years(fit: PosteriorFit, years):
    if years is None:
        if fit.scheme is not None:
            return tuple(fit.scheme.years)
        if fit.data is not None:
            return fit.data.years
        raise ValueError("years must be given when the fit carries no survey")
    return tuple(years)


def _draws(fit, n_samples, seed, samples):
    if samples is not None:
        return np.atleast_2d(samples)
    return sample_latent(fit, n_samples, seed=seed)


def intensity_surface(
    fit: PosteriorFit, n_samples: int = DEFAULT_SAMPLES, years=None, seed=None, samples=None
) -> SurfaceSummary:
    """Quartiles, mean and sd of ``lambda = exp(x' beta + xi)`` at every vertex and year."""
    if samples is None and n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    years = _years(fit, years)
    S = _draws(fit, n_samples, seed, samples)
    fixed, field = linear_predictor_parts(fit.spec, S, years)
    lam = np.exp(fixed + field[:, None, :])  # (n, T, m)
    q1, q2, q3 = np.quantile(lam, [0.25, 0.5, 0.75], axis=0)
    return SurfaceSummary(
        years, q2.T, q1.T, q3.T, lam.mean(axis=0).T, lam.std(axis=0, ddof=1).T if len(S) > 1 else np.zeros_like(q2.T), len(S)
    )


@dataclass(frozen=True, eq=False)
class AbundanceResult:
    samples: np.ndarray
    median: float
    lower: float
    upper: float
    area: float


def abundance(
    fit: PosteriorFit, region, year, n_samples: int = DEFAULT_SAMPLES, seed=None, samples=None
) -> AbundanceResult:
    """Posterior draws of the expected number of objects in ``region`` during ``year``.

    Each draw integrates ``exp(eta)`` with lumped vertex weights of the
    region, ``sum_T |T cap region| / 3`` per triangle vertex.
    """
    w = region_weights(fit.spec.mesh, region)
    S = _draws(fit, n_samples, seed, samples)
    fixed, field = linear_predictor_parts(fit.spec, S, (year,))
    vals = np.exp(fixed[:, 0, :] + field) @ w
    lo, med, hi = np.quantile(vals, [0.025, 0.5, 0.975]) if len(vals) else (np.nan,) * 3
    return AbundanceResult(vals, float(med), float(lo), float(hi), float(w.sum()))


@dataclass(frozen=True, eq=False)
class VarianceDecomposition:
    """Split of the posterior spread of ``eta`` into fixed-effect and field parts.

    Pointwise arrays have shape ``(n_vertices, n_years)``; ``V_xi`` is
    broadcast over years. ``rho`` is ``None`` when either variance is below
    1e-12. ``se_V_eta`` is the Monte Carlo standard error of ``V_eta``.
    """

    years: tuple
    M_eta: float
    M_beta: float
    M_xi: float
    V_eta: np.ndarray
    V_beta: np.ndarray
    V_xi: np.ndarray
    C: np.ndarray
    V_eta_avg: float
    V_beta_avg: float
    V_xi_avg: float
    C_avg: float
    rho: float | None
    se_V_eta: np.ndarray

    def table_row(self) -> dict:
        return {
            "V_eta": self.V_eta_avg,
            "V_beta": self.V_beta_avg,
            "V_xi": self.V_xi_avg,
            "C": self.C_avg,
            "rho": self.rho,
        }


def variance_decomposition(
    fit: PosteriorFit, n_samples: int = DEFAULT_SAMPLES, years=None, seed=None, samples=None, weights=None
) -> VarianceDecomposition:
    """Posterior variability of ``eta`` around its space-time mean.

    Space averages use lumped-mass vertex ``weights`` (the mesh by default);
    years carry equal weight.
    """
    years = _years(fit, years)
    S = _draws(fit, n_samples, seed, samples)
    fixed, field = linear_predictor_parts(fit.spec, S, years)
    w = fit.spec.fem.mass_lumped if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    T = len(years)

    def st_avg(a):  # a: (..., T, m) -> space-time average
        return float(np.mean(a @ w, axis=-1)) if a.ndim == 2 else (a @ w).mean(axis=-1)

    Ef = fixed.mean(axis=0)  # (T, m)
    Ex = field.mean(axis=0)  # (m,)
    M_beta = st_avg(Ef)
    M_xi = float(Ex @ w)
    M_eta = M_beta + M_xi
    df = fixed - M_beta
    dx = (field - M_xi)[:, None, :]
    de = df + dx
    V_beta = np.mean(df**2, axis=0)
    V_xi = np.broadcast_to(np.mean(dx**2, axis=0), (T, len(w)))
    C = np.mean(df * dx, axis=0)
    V_eta = np.mean(de**2, axis=0)
    se = (de**2).std(axis=0, ddof=1) / math.sqrt(len(S)) if len(S) > 1 else np.zeros_like(V_eta)
    Vb, Vx, Cv, Ve = st_avg(V_beta), st_avg(np.asarray(V_xi)), st_avg(C), st_avg(V_eta)
    rho = Cv / math.sqrt(Vb * Vx) if (Vb >= RHO_MIN_VARIANCE and Vx >= RHO_MIN_VARIANCE) else None
    if rho is not None:
        rho = float(np.clip(rho, -1.0, 1.0))
    return VarianceDecomposition(
        years, M_eta, M_beta, M_xi, V_eta.T, V_beta.T, np.array(V_xi).T, C.T, Ve, Vb, Vx, Cv, rho, se.T
    )
