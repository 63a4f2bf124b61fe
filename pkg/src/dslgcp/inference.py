"""Laplace approximation of the latent posterior and hyperparameter grids.

For fixed hyperparameters ``theta`` the latent posterior is approximated by
the Gaussian at its mode, found by damped Newton iterations on

    f(x) = loglik(x) - x' Q(theta) x / 2.

The Laplace evidence ``log pi(Y | theta) + log pi(theta)`` weights a
regular grid of ``theta`` values; posterior summaries integrate over the
grid as a finite mixture of Gaussians.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr

from .integration import IntegrationScheme
from .linalg import NotPositiveDefiniteError, SparseCholesky
from .model import Likelihood, ModelSpec, PointProcessLikelihood, SurveyData

__all__ = [
    "ConvergenceError",
    "InferenceError",
    "GridConfig",
    "ThetaGrid",
    "GaussianApprox",
    "PosteriorFit",
    "MarginalSummary",
    "laplace_fit",
    "fit",
    "sample_latent",
    "latent_marginals",
    "mixture_quantiles",
]

log = logging.getLogger(__name__)

MIN_RELATIVE_WEIGHT = 1e-6


class ConvergenceError(RuntimeError):
    """Newton iterations failed to converge; ``trajectory`` holds (objective, grad norm) pairs."""

    def __init__(self, msg, trajectory=()):
        super().__init__(msg)
        self.trajectory = list(trajectory)


class InferenceError(RuntimeError):
    """Every grid point failed."""


@dataclass(frozen=True, eq=False)
class GaussianApprox:
    """Gaussian approximation at one hyperparameter value.

    ``factor`` is the Cholesky factor of the negative Hessian of the log
    joint at the mode; ``log_evidence`` is the Laplace estimate of
    ``log pi(Y | theta) + log pi(theta)``.
    """

    theta: np.ndarray
    mode: np.ndarray
    precision: sp.csc_matrix
    factor: SparseCholesky
    log_evidence: float
    log_joint: float
    n_iter: int
    grad_norm: float

    def marginal_sd(self) -> np.ndarray:
        return np.sqrt(self.factor.inv_diag())


def _initial_point(spec: ModelSpec, lik) -> np.ndarray:
    lay = spec.layout
    x = np.zeros(lay.n)
    det = spec.detection
    if det.kind == "half_normal":
        x[lay.detect] = 4.0 / det.z_max**2  # sigma_g = z_max / 2
    if spec.intercept and isinstance(lik, PointProcessLikelihood):
        mass = lik.expected_count(x)
        n_obs = lik.A_obs.shape[0]
        if mass > 0:
            x[0] = math.log((n_obs + 0.5) / mass)
    return x


def laplace_fit(
    spec: ModelSpec,
    data: SurveyData | None,
    scheme: IntegrationScheme | None,
    theta,
    x0=None,
    likelihood: Likelihood | None = None,
    tol: float = 1e-6,
    max_iter: int = 50,
) -> GaussianApprox:
    """Newton optimization of the log joint at fixed ``theta``.

    Parameters
    ----------
    spec, data, scheme
        Model and survey. ``data`` and ``scheme`` may be ``None`` when a
        ``likelihood`` is supplied.
    theta : array_like
        Hyperparameters, ``spec.n_theta`` values.
    x0 : array_like, optional
        Starting point (warm start).
    likelihood : Likelihood, optional
        Replaces the point-process likelihood, e.g. by a Gaussian
        pseudo-likelihood in tests.
    tol : float
        Convergence when ``max |grad| <= tol * scale``; ``scale`` is the
        largest observed-data gradient entry (at least 1).

    Raises
    ------
    ConvergenceError
        After ``max_iter`` iterations without convergence.
    NotPositiveDefiniteError
        If the final negative Hessian cannot be factorized.
    """
    theta = np.asarray(theta, dtype=float).reshape(spec.n_theta)
    lik = likelihood if likelihood is not None else PointProcessLikelihood(spec, data, scheme)
    Q = spec.prior_precision(theta)
    x = _initial_point(spec, lik) if x0 is None else np.array(x0, dtype=float)
    scale = max(1.0, float(np.max(np.abs(lik.obs_sum)))) if hasattr(lik, "obs_sum") else 1.0

    def objective(x):
        v = lik.value(x)
        return v - 0.5 * x @ (Q @ x) if np.isfinite(v) else -np.inf

    f = objective(x)
    if not np.isfinite(f):
        raise ConvergenceError("log joint is not finite at the starting point")
    traj = []
    boost = 0.0
    n = len(x)
    I = sp.identity(n, format="csc")
    for it in range(max_iter + 1):
        g = lik.gradient(x) - Q @ x
        gn = float(np.max(np.abs(g))) if n else 0.0
        traj.append((f, gn))
        if gn <= tol * scale:
            break
        if it == max_iter:
            raise ConvergenceError(
                f"Newton did not converge in {max_iter} iterations (|grad| = {gn:.3e}); last objectives "
                + ", ".join(f"{a:.6g}" for a, _ in traj[-5:]),
                traj,
            )
        H = (Q - lik.hessian(x)).tocsc()
        while True:
            try:
                step = SparseCholesky(H + boost * I if boost else H).solve(g)
                break
            except NotPositiveDefiniteError:
                boost = max(10.0 * boost, 1e-6 * max(1.0, abs(H.diagonal()).max()))
                if boost > 1e12:
                    raise
        boost *= 0.1 if boost > 1e-8 else 0.0
        t = 1.0
        for _ in range(40):
            xn = x + t * step
            fn = objective(xn)
            if fn >= f - 1e-12 * abs(f):
                break
            t *= 0.5
        else:
            raise ConvergenceError("line search failed to improve the log joint", traj)
        x, f = xn, fn
    H = (Q - lik.hessian(x)).tocsc()
    try:
        fac = SparseCholesky(H)
    except NotPositiveDefiniteError as exc:
        raise NotPositiveDefiniteError(
            f"negative Hessian at the mode is not positive definite ({exc}); consider stronger priors"
        ) from exc
    log_q = SparseCholesky(Q).logdet()
    log_joint = lik.value(x) - 0.5 * x @ (Q @ x) + 0.5 * log_q - 0.5 * n * math.log(2 * math.pi)
    log_ev = log_joint - 0.5 * fac.logdet() + 0.5 * n * math.log(2 * math.pi) + spec.log_prior_theta(theta)
    return GaussianApprox(theta, x, H, fac, float(log_ev), float(log_joint), it, gn)


# ------------------------------------------------------------------- grids


@dataclass(frozen=True)
class GridConfig:
    """Regular grid over hyperparameters.

    Each axis spans ``center +/- width * prior sd`` with ``n_points`` values
    (``n_gamma`` for the detection smoothness). ``axes`` overrides the
    construction entirely.
    """

    n_points: int = 7
    n_gamma: int = 13
    width: float = 3.0
    center: tuple | None = None
    axes: tuple | None = None

    def build_axes(self, spec: ModelSpec) -> list[np.ndarray]:
        if self.axes is not None:
            if len(self.axes) != spec.n_theta:
                raise ValueError(f"expected {spec.n_theta} grid axes")
            return [np.atleast_1d(np.asarray(a, dtype=float)) for a in self.axes]
        sd = spec.theta_prior_sd()
        center = np.zeros(spec.n_theta) if self.center is None else np.asarray(self.center, dtype=float)
        out = []
        for j, name in enumerate(spec.theta_names):
            k = self.n_gamma if name == "theta3" else self.n_points
            if k == 1:
                out.append(np.array([center[j]]))
            else:
                out.append(center[j] + np.linspace(-self.width, self.width, k) * sd[j])
        return out


@dataclass(frozen=True, eq=False)
class ThetaGrid:
    names: tuple
    axes: list
    points: np.ndarray
    log_posterior: np.ndarray
    weights: np.ndarray

    @property
    def active(self) -> np.ndarray:
        """Indices retained for sampling (weight at least 1e-6 of the maximum)."""
        if not len(self.weights):
            return np.zeros(0, dtype=int)
        return np.flatnonzero(self.weights >= MIN_RELATIVE_WEIGHT * self.weights.max())


@dataclass(frozen=True, eq=False)
class PosteriorFit:
    spec: ModelSpec
    data: SurveyData | None
    scheme: IntegrationScheme | None
    grid: ThetaGrid
    approxs: list
    provenance: dict = field(default_factory=dict)

    def theta_mean(self) -> np.ndarray:
        return self.grid.weights @ self.grid.points if self.grid.points.size else np.zeros(0)

    def mixture(self):
        """Active grid indices and their renormalized weights."""
        idx = self.grid.active
        w = self.grid.weights[idx]
        return idx, w / w.sum()


def _normalize(logp):
    logp = np.asarray(logp, dtype=float)
    ok = np.isfinite(logp)
    w = np.zeros_like(logp)
    if ok.any():
        m = logp[ok].max()
        w[ok] = np.exp(logp[ok] - m)
        w /= w.sum()
    return w


def fit(
    spec: ModelSpec,
    data: SurveyData | None,
    scheme: IntegrationScheme | None,
    grid: GridConfig | None = None,
    workers: int = 1,
    likelihood: Likelihood | None = None,
    order=None,
    provenance: dict | None = None,
) -> PosteriorFit:
    """Laplace fits over a hyperparameter grid, weighted by their evidence.

    The grid point nearest the center is fitted first and its mode
    warm-starts every other point. ``order`` permutes the traversal of the
    remaining points (results do not depend on it). Points that fail get
    zero weight; if all fail :class:`InferenceError` is raised.
    """
    grid = grid or GridConfig()
    lik = likelihood if likelihood is not None else PointProcessLikelihood(spec, data, scheme)
    axes = grid.build_axes(spec)
    points = np.array(list(itertools.product(*axes))) if axes else np.zeros((1, 0))
    if spec.n_theta:
        mid = np.array([a[len(a) // 2] for a in axes])
        c = int(np.argmin(np.linalg.norm(points - mid, axis=1)))
    else:
        c = 0
    approxs: list = [None] * len(points)
    errors: dict = {}

    def run(k, x0):
        try:
            return laplace_fit(spec, None, None, points[k], x0=x0, likelihood=lik)
        except (ConvergenceError, NotPositiveDefiniteError, FloatingPointError) as exc:
            errors[k] = exc
            log.warning("grid point %s failed: %s", points[k], exc)
            return None

    approxs[c] = run(c, None)
    x0 = approxs[c].mode if approxs[c] is not None else None
    rest = [k for k in range(len(points)) if k != c]
    if order is not None:
        rest = [rest[i] for i in order]
    if workers > 1 and rest:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for k, res in zip(rest, pool.map(lambda k: run(k, x0), rest)):
                approxs[k] = res
    else:
        for k in rest:
            approxs[k] = run(k, x0)
    if all(a is None for a in approxs):
        msgs = "; ".join(f"{points[k].tolist()}: {e}" for k, e in list(errors.items())[:5])
        raise InferenceError(f"all {len(points)} grid points failed ({msgs})")
    logp = np.array([a.log_evidence if a is not None else -np.inf for a in approxs])
    tg = ThetaGrid(spec.theta_names, axes, points, logp, _normalize(logp))
    return PosteriorFit(spec, data, scheme, tg, approxs, dict(provenance or {}))


# ----------------------------------------------------------------- sampling


def sample_latent(fit: PosteriorFit, n: int, seed=None, return_index: bool = False):
    """Draw latent vectors from the mixture of Gaussian approximations.

    Deterministic for a fixed seed: the grid points are drawn first, then
    the Gaussian draws are generated grid point by grid point in index order.
    """
    n_lat = fit.spec.layout.n
    rng = np.random.default_rng(seed)
    out = np.zeros((n, n_lat))
    if n == 0:
        return (out, np.zeros(0, dtype=int)) if return_index else out
    idx, w = fit.mixture()
    ks = idx[rng.choice(len(idx), size=n, p=w)]
    for k in np.unique(ks):
        rows = np.flatnonzero(ks == k)
        a = fit.approxs[k]
        z = rng.standard_normal((n_lat, len(rows)))
        out[rows] = a.mode[None, :] + a.factor.solve_Lt(z).T
    return (out, ks) if return_index else out


@dataclass(frozen=True)
class MarginalSummary:
    names: list
    mean: np.ndarray
    sd: np.ndarray
    probs: tuple
    quantiles: np.ndarray  # (n_components, n_probs)


def mixture_quantiles(means, sds, weights, probs, tol: float = 1e-8) -> np.ndarray:
    """Quantiles of normal mixtures, one mixture per row, by bisection on the CDF.

    ``means`` and ``sds`` have shape ``(n, K)``; returns ``(n, len(probs))``.
    """
    M = np.atleast_2d(np.asarray(means, dtype=float))
    S = np.atleast_2d(np.asarray(sds, dtype=float))
    w = np.asarray(weights, dtype=float)
    out = np.empty((M.shape[0], len(probs)))
    span = np.maximum(S.max(axis=1), 1e-300)
    for j, p in enumerate(probs):
        lo = (M - 12 * S).min(axis=1) - span
        hi = (M + 12 * S).max(axis=1) + span
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            with np.errstate(divide="ignore", invalid="ignore"):
                z = np.where(S > 0, (mid[:, None] - M) / np.where(S > 0, S, 1.0), np.where(mid[:, None] >= M, np.inf, -np.inf))
            F = ndtr(z) @ w
            below = F < p
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= tol * np.maximum(1.0, np.abs(mid))):
                break
        out[:, j] = 0.5 * (lo + hi)
    return out


def latent_marginals(fit: PosteriorFit, probs=(0.025, 0.5, 0.975), components=None) -> MarginalSummary:
    """Mixture-of-Gaussians marginals of latent components.

    ``components`` selects indices (default: all).
    """
    names = fit.spec.layout.component_names()
    comp = np.arange(len(names)) if components is None else np.asarray(components, dtype=int)
    idx, w = fit.mixture()
    M = np.column_stack([fit.approxs[k].mode[comp] for k in idx])
    S = np.column_stack([fit.approxs[k].marginal_sd()[comp] for k in idx])
    mean = M @ w
    var = (S**2 + M**2) @ w - mean**2
    q = mixture_quantiles(M, S, w, probs)
    return MarginalSummary([names[i] for i in comp], mean, np.sqrt(np.maximum(var, 0.0)), tuple(probs), q)
