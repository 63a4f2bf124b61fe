"""Log-linear detection functions.

Two models share the form ``log g(z) = -d(z) . coef``:

* half-normal: ``d(z) = z^2 / 2`` and ``coef = [1 / sigma_g^2]``;
* semi-parametric spline: ``d(z)`` are quadratic B-splines on
  ``[0, z_max]`` restricted to those with ``B(0) = B'(0) = 0``, so that
  ``g(0) = 1`` and ``g`` is flat at the line, with a Gaussian prior
  derived from ``gamma G'' = white noise``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SplineBasis",
    "DetectionModel",
    "half_normal",
    "spline",
    "uniform_breakpoints",
    "spline_basis_eval",
    "detect_prob",
    "log_detect_prob",
    "spline_prior_precision",
    "monotone_filter",
    "negative_G_fraction",
    "DetectionRangeError",
]

N_EXCLUDED = 2  # basis functions violating G(0) = 0 or G'(0) = 0


class DetectionRangeError(ValueError):
    """Distance outside ``[0, z_max]``."""


def uniform_breakpoints(z_max: float, p: int = 5) -> np.ndarray:
    return z_max * np.arange(p + 1) / p


def _bspline_all(knots: np.ndarray, degree: int, z: np.ndarray) -> np.ndarray:
    """Cox-de Boor values of all B-splines on an open knot vector, right end closed."""
    n_basis = len(knots) - degree - 1
    z = np.asarray(z, dtype=float)
    last = np.flatnonzero(knots[:-1] < knots[1:])[-1]
    # degree-0 indicator on half-open spans, the final non-empty span closed
    B = np.zeros((z.size, len(knots) - 1))
    for i in range(len(knots) - 1):
        if knots[i] < knots[i + 1]:
            if i == last:
                B[:, i] = (z >= knots[i]) & (z <= knots[i + 1])
            else:
                B[:, i] = (z >= knots[i]) & (z < knots[i + 1])
    for k in range(1, degree + 1):
        Bn = np.zeros((z.size, len(knots) - 1 - k))
        for i in range(len(knots) - 1 - k):
            left = knots[i + k] - knots[i]
            right = knots[i + k + 1] - knots[i + 1]
            term = np.zeros(z.size)
            if left > 0:
                term += (z - knots[i]) / left * B[:, i]
            if right > 0:
                term += (knots[i + k + 1] - z) / right * B[:, i + 1]
            Bn[:, i] = term
        B = Bn
    assert B.shape[1] == n_basis
    return B


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """Quadratic B-splines on ``0 = z_0 < ... < z_p = z_max`` meeting the boundary conditions."""

    breakpoints: np.ndarray
    degree: int = field(default=2, init=False)

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        if b.ndim != 1 or len(b) < 3:
            raise ValueError("need at least three breakpoints (p >= 2)")
        if b[0] != 0.0:
            raise ValueError("first breakpoint must be 0")
        if np.any(np.diff(b) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        b.setflags(write=False)
        object.__setattr__(self, "breakpoints", b)

    @property
    def z_max(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def p(self) -> int:
        return len(self.breakpoints) - 1

    @property
    def knots(self) -> np.ndarray:
        b = self.breakpoints
        return np.concatenate([[b[0]] * 2, b, [b[-1]] * 2])

    def full(self, z) -> np.ndarray:
        """All ``p + 2`` B-splines, including the two excluded at the origin."""
        return _bspline_all(self.knots, 2, np.atleast_1d(z))

    def __call__(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        tol = 1e-12 * self.z_max
        if np.any(z < -tol) or np.any(z > self.z_max + tol):
            raise DetectionRangeError(f"distance outside [0, {self.z_max}]")
        return self.full(np.clip(z, 0.0, self.z_max))[:, N_EXCLUDED:]

    def second_derivatives(self) -> np.ndarray:
        """``(p, p)`` array: row k holds B_i'' on breakpoint interval k (piecewise constant)."""
        b = self.breakpoints
        a, c = b[:-1], b[1:]
        m = 0.5 * (a + c)
        h2 = (0.5 * (c - a)) ** 2
        return (self(a) - 2.0 * self(m) + self(c)) / h2[:, None]

    def roughness(self) -> np.ndarray:
        """Gram matrix of second derivatives, ``int B_i'' B_j'' dz``."""
        D = self.second_derivatives()
        h = np.diff(self.breakpoints)
        return D.T @ (h[:, None] * D)


def spline_basis_eval(basis: SplineBasis, z) -> np.ndarray:
    """Values ``B_i(z)`` of the retained basis; shape ``(n, p)`` (or ``(p,)`` for scalar z)."""
    out = basis(z)
    return out[0] if np.ndim(z) == 0 else out


def spline_prior_precision(basis: SplineBasis, gamma: float, ridge: float = 1e-8) -> np.ndarray:
    """Precision of the spline weights implied by ``gamma G'' = W``.

    ``Q = gamma^2 (R + ridge * mean(diag R) * I)`` where ``R`` is the
    roughness Gram matrix; ``R`` is already positive definite on the
    retained basis, the ridge only guards factorization.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    R = basis.roughness()
    R = 0.5 * (R + R.T)
    return gamma**2 * (R + ridge * np.mean(np.diag(R)) * np.eye(basis.p))


@dataclass(frozen=True, eq=False)
class DetectionModel:
    """Detection function ``g(z) = exp(-d(z) . coef)``.

    ``coef`` holds ``[beta_g]`` for the half-normal model and the spline
    weights for the spline model; it may be ``None`` for a model used only
    as a structural template.
    """

    kind: str
    z_max: float
    coef: np.ndarray | None = None
    basis: SplineBasis | None = None
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in ("half_normal", "spline"):
            raise ValueError(f"unknown detection kind {self.kind!r}")
        if not self.z_max > 0:
            raise ValueError("z_max must be positive")
        if self.kind == "spline":
            if self.basis is None:
                object.__setattr__(self, "basis", SplineBasis(uniform_breakpoints(self.z_max)))
            if abs(self.basis.z_max - self.z_max) > 1e-12 * self.z_max:
                raise ValueError("last breakpoint must equal z_max")
        if self.coef is not None:
            c = np.atleast_1d(np.asarray(self.coef, dtype=float))
            if c.shape != (self.n_coef,):
                raise ValueError(f"expected {self.n_coef} coefficients, got {c.shape}")
            object.__setattr__(self, "coef", c)

    @property
    def n_coef(self) -> int:
        return 1 if self.kind == "half_normal" else self.basis.p

    def design(self, z) -> np.ndarray:
        """``d(z)``: rows such that ``log g(z) = -design(z) @ coef``."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        if self.kind == "spline":
            return self.basis(z)
        tol = 1e-12 * self.z_max
        if np.any(z < -tol) or np.any(z > self.z_max + tol):
            raise DetectionRangeError(f"distance outside [0, {self.z_max}]")
        return (0.5 * z**2)[:, None]

    def with_coef(self, coef) -> "DetectionModel":
        return DetectionModel(self.kind, self.z_max, coef, self.basis, self.gamma)


def half_normal(sigma_g: float, z_max: float) -> DetectionModel:
    return DetectionModel("half_normal", z_max, [1.0 / sigma_g**2])


def spline(z_max: float, coef=None, breakpoints=None, p: int = 5, gamma: float | None = None) -> DetectionModel:
    bp = uniform_breakpoints(z_max, p) if breakpoints is None else breakpoints
    return DetectionModel("spline", z_max, coef, SplineBasis(bp), gamma)


def log_detect_prob(model: DetectionModel, z, coef=None) -> np.ndarray:
    c = model.coef if coef is None else np.asarray(coef, dtype=float)
    if c is None:
        raise ValueError("detection model has no coefficients")
    out = -(model.design(z) @ c.T)
    return out[0] if np.ndim(z) == 0 and out.ndim == 1 else out


def detect_prob(model: DetectionModel, z, coef=None):
    """``g(z)``; with a 2-D ``coef`` (samples by coefficients) returns ``(n_z, n_samples)``."""
    out = np.exp(log_detect_prob(model, z, coef))
    return float(out) if np.ndim(out) == 0 else out


def monotone_filter(samples, basis: SplineBasis, n_grid: int = 512, return_mask: bool = False):
    """Keep coefficient samples whose ``G(z)`` is non-decreasing on a dense grid."""
    S = np.atleast_2d(np.asarray(samples, dtype=float))
    z = np.linspace(0.0, basis.z_max, n_grid)
    G = basis(z) @ S.T
    scale = np.maximum(np.abs(G).max(axis=0), 1.0)
    mask = np.all(np.diff(G, axis=0) >= -1e-12 * scale, axis=0)
    if not mask.any():
        warnings.warn(
            "monotone filter rejected every sample; the posterior favours non-monotone detection",
            RuntimeWarning,
            stacklevel=2,
        )
    return (S[mask], mask) if return_mask else S[mask]


def negative_G_fraction(samples, basis: SplineBasis, n_grid: int = 512) -> float:
    """Fraction of (sample, grid point) pairs where ``G < 0``, i.e. ``g > 1``."""
    S = np.atleast_2d(np.asarray(samples, dtype=float))
    z = np.linspace(0.0, basis.z_max, n_grid)[1:]
    G = basis(z) @ S.T
    return float(np.mean(G < -1e-12))
