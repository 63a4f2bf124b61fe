"""scikit-learn style wrapper around the model, fit and prediction functions."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .detection import half_normal, spline
from .inference import GridConfig, fit, latent_marginals, sample_latent
from .integration import Transect, build_scheme
from .mesh import TriMesh, basis_matrix
from .model import Detections, ModelSpec, SurveyData, coordinate_covariates, recommended_R, validate_survey
from .predict import intensity_surface, linear_predictor_parts

__all__ = ["DistanceSamplingLGCP", "check_survey", "check_points"]


def check_survey(X) -> SurveyData:
    """Accept a :class:`SurveyData` or a ``(transects, detections)`` pair."""
    if isinstance(X, SurveyData):
        return X
    if isinstance(X, tuple) and len(X) == 2:
        transects, det = X
        if not all(isinstance(t, Transect) for t in transects):
            raise TypeError("first element must be a sequence of Transect")
        if not isinstance(det, Detections):
            raise TypeError("second element must be Detections")
        return SurveyData(transects, det)
    raise TypeError(f"expected SurveyData or (transects, detections), got {type(X).__name__}")


def check_points(X) -> np.ndarray:
    """Finite ``(n, 2)`` float array of locations."""
    P = check_array(X, dtype=float, ensure_min_samples=1)
    if P.shape[1] != 2:
        raise ValueError(f"points must have two columns, got {P.shape[1]}")
    return P


class DistanceSamplingLGCP(BaseEstimator):
    """Thinned log-Gaussian Cox process for line-transect surveys.

    Parameters
    ----------
    mesh : TriMesh
    half_width : float
        Strip half-width ``z_max`` (km).
    detection : {"half_normal", "spline"}
    spline_p : int
        Number of breakpoint intervals of the spline detection function.
    fixed_effects : tuple of str
        Covariate names; ``"x"`` and ``"y"`` (vertex coordinates) are built in.
    covariates : dict of CovariateField, optional
    intercept, field : bool
    R : int, optional
        Distance quadrature nodes; by default 5 for the half-normal and
        ``4 spline_p + 1`` for the spline.
    subdivide : bool
        Refine triangles once before accumulating the integration scheme.
    n_points, n_gamma, grid_width
        Hyperparameter grid (see :class:`dslgcp.inference.GridConfig`).
    beta_prec : float
    detection_site : {"midline", "observed"}
    n_samples : int
        Posterior draws used by :meth:`predict`.
    workers : int
    random_state : int, optional
    """

    def __init__(
        self,
        mesh: TriMesh | None = None,
        half_width: float = 1.0,
        detection: str = "half_normal",
        spline_p: int = 5,
        fixed_effects: tuple = (),
        covariates: dict | None = None,
        intercept: bool = True,
        field: bool = True,
        R: int | None = None,
        subdivide: bool = False,
        n_points: int = 7,
        n_gamma: int = 13,
        grid_width: float = 3.0,
        beta_prec: float = 1e-3,
        detection_site: str = "midline",
        n_samples: int = 2000,
        workers: int = 1,
        random_state=None,
    ):
        self.mesh = mesh
        self.half_width = half_width
        self.detection = detection
        self.spline_p = spline_p
        self.fixed_effects = fixed_effects
        self.covariates = covariates
        self.intercept = intercept
        self.field = field
        self.R = R
        self.subdivide = subdivide
        self.n_points = n_points
        self.n_gamma = n_gamma
        self.grid_width = grid_width
        self.beta_prec = beta_prec
        self.detection_site = detection_site
        self.n_samples = n_samples
        self.workers = workers
        self.random_state = random_state

    def _spec(self, years) -> ModelSpec:
        if not isinstance(self.mesh, TriMesh):
            raise TypeError("mesh must be a TriMesh")
        covs = coordinate_covariates(self.mesh, years)
        covs.update(self.covariates or {})
        if self.detection == "half_normal":
            det = half_normal(1.0, self.half_width)
        elif self.detection == "spline":
            det = spline(self.half_width, p=self.spline_p)
        else:
            raise ValueError(f"unknown detection {self.detection!r}")
        return ModelSpec(
            self.mesh, det, covs, tuple(self.fixed_effects), intercept=self.intercept, field=self.field,
            beta_prec=self.beta_prec, detection_site=self.detection_site,
        )

    def fit(self, X, y=None):
        """Fit to survey data ``X`` (``y`` is ignored)."""
        data = check_survey(X)
        validate_survey(self.mesh, data)
        self.years_ = data.years
        self.spec_ = self._spec(self.years_)
        R = recommended_R(self.spec_.detection) if self.R is None else self.R
        self.scheme_ = build_scheme(self.mesh, data.transects, R=R, years=self.years_, subdivide=self.subdivide)
        grid = GridConfig(n_points=self.n_points, n_gamma=self.n_gamma, width=self.grid_width)
        self.fit_ = fit(self.spec_, data, self.scheme_, grid, workers=self.workers)
        lay = self.spec_.layout
        m = latent_marginals(self.fit_, components=list(range(lay.n_beta)) + list(range(lay.detect.start, lay.n)))
        self.coef_ = dict(zip(m.names, m.mean))
        self.coef_sd_ = dict(zip(m.names, m.sd))
        self.theta_weights_ = self.fit_.grid.weights
        self.n_features_in_ = 2
        return self

    def sample(self, n: int, seed=None) -> np.ndarray:
        check_is_fitted(self, "fit_")
        return sample_latent(self.fit_, n, seed=self.random_state if seed is None else seed)

    def predict(self, X, year=None) -> np.ndarray:
        """Posterior median intensity at locations ``X`` during ``year`` (default: first year)."""
        check_is_fitted(self, "fit_")
        P = check_points(X)
        year = self.years_[0] if year is None else year
        S = self.sample(self.n_samples)
        fixed, field = linear_predictor_parts(self.spec_, S, (year,))
        B = basis_matrix(self.mesh, P)
        eta = (B @ (fixed[:, 0, :] + field).T).T
        return np.median(np.exp(eta), axis=0)

    def predict_surface(self, years=None):
        """Posterior quartiles of the intensity at mesh vertices."""
        check_is_fitted(self, "fit_")
        return intensity_surface(self.fit_, self.n_samples, years=years or self.years_, seed=self.random_state)
