"""Matérn fields (alpha = 2) as Gaussian Markov random fields on a P1 mesh."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import kv

from .linalg import NotPositiveDefiniteError, SparseCholesky
from .mesh import FemMatrices, TriMesh

__all__ = [
    "SpdePrior",
    "SpdeParams",
    "GmrfPrecision",
    "default_prior",
    "link",
    "precision",
    "matern_correlation",
    "log_prior",
    "sample_gmrf",
]

SQRT8 = math.sqrt(8.0)


@dataclass(frozen=True)
class SpdePrior:
    """Independent log-normal priors on the field sd and range.

    ``sigma0`` and ``rho0`` are prior medians; the variances are on the log
    scale, i.e. the variances of the normal priors on ``theta1`` and ``theta2``.
    """

    sigma0: float = 1.0
    rho0: float = 1.0
    var_log_sigma: float = 10.0
    var_log_rho: float = 1.0

    def __post_init__(self):
        for name in ("sigma0", "rho0", "var_log_sigma", "var_log_rho"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be finite and positive, got {val!r}")

    @property
    def kappa0(self) -> float:
        return SQRT8 / self.rho0

    @property
    def tau0(self) -> float:
        return 1.0 / math.sqrt(4.0 * math.pi * self.kappa0**2 * self.sigma0**2)


def default_prior(mesh: TriMesh) -> SpdePrior:
    """sigma0 = 1 and rho0 = one fifth of the mesh bounding-box diameter."""
    return SpdePrior(sigma0=1.0, rho0=mesh.bbox_diameter() / 5.0, var_log_sigma=10.0, var_log_rho=1.0)


@dataclass(frozen=True)
class SpdeParams:
    theta1: float
    theta2: float
    tau0: float
    kappa0: float

    @property
    def tau(self) -> float:
        return math.exp(math.log(self.tau0) - self.theta1 + self.theta2)

    @property
    def kappa(self) -> float:
        return math.exp(math.log(self.kappa0) - self.theta2)

    @property
    def sigma(self) -> float:
        return 1.0 / math.sqrt(4.0 * math.pi * self.kappa**2 * self.tau**2)

    @property
    def rho(self) -> float:
        return SQRT8 / self.kappa


@dataclass(frozen=True, eq=False)
class GmrfPrecision:
    Q: sp.csc_matrix

    def factor(self) -> SparseCholesky:
        return SparseCholesky(self.Q)


def link(theta1: float, theta2: float, prior: SpdePrior) -> SpdeParams:
    """Map internal parameters to (tau, kappa): sigma = sigma0 e^theta1, rho = rho0 e^theta2."""
    return SpdeParams(float(theta1), float(theta2), prior.tau0, prior.kappa0)


def precision(fem: FemMatrices, params: SpdeParams | None = None, *, tau=None, kappa=None) -> GmrfPrecision:
    """Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G) with lumped C."""
    if params is not None:
        tau, kappa = params.tau, params.kappa
    if tau is None or kappa is None or not (tau > 0 and kappa > 0):
        raise ValueError(f"tau and kappa must be positive, got tau={tau}, kappa={kappa}")
    C = sp.diags(fem.mass_lumped)
    Cinv = sp.diags(1.0 / fem.mass_lumped)
    G = fem.stiffness
    Q = tau**2 * (kappa**4 * C + 2.0 * kappa**2 * G + G @ Cinv @ G)
    Q = sp.csc_matrix(0.5 * (Q + Q.T))
    return GmrfPrecision(Q)


def matern_correlation(d, kappa):
    """Matérn correlation with smoothness 1: kappa d K_1(kappa d), equal to 1 at d = 0."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0) or not kappa > 0:
        raise ValueError("need d >= 0 and kappa > 0")
    x = kappa * d
    with np.errstate(invalid="ignore", over="ignore"):
        out = np.where(x > 0, x * kv(1, np.where(x > 0, x, 1.0)), 1.0)
    return out if out.ndim else float(out)


def log_prior(theta1: float, theta2: float, prior: SpdePrior) -> float:
    """Sum of independent zero-mean normal log densities on theta1 and theta2."""
    v1, v2 = prior.var_log_sigma, prior.var_log_rho
    return float(
        -0.5 * math.log(2 * math.pi * v1) - 0.5 * theta1**2 / v1
        - 0.5 * math.log(2 * math.pi * v2) - 0.5 * theta2**2 / v2
    )


def sample_gmrf(Q, seed=None, size: int | None = None) -> np.ndarray:
    """Draw from N(0, Q^{-1}) through the sparse Cholesky factor.

    ``Q`` may be a :class:`GmrfPrecision`, a sparse matrix or a
    :class:`SparseCholesky`. With ``size`` the result has shape ``(size, n)``.
    """
    if isinstance(Q, SparseCholesky):
        fac = Q
    else:
        mat = Q.Q if isinstance(Q, GmrfPrecision) else Q
        try:
            fac = SparseCholesky(mat)
        except NotPositiveDefiniteError as exc:
            raise NotPositiveDefiniteError(f"precision is not positive definite: {exc}") from exc
    rng = np.random.default_rng(seed)
    if size is None:
        return fac.solve_Lt(rng.standard_normal(fac.n))
    return fac.solve_Lt(rng.standard_normal((fac.n, size))).T
