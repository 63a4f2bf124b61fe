"""Distance-sampling log-Gaussian Cox process models on triangulated meshes."""

__version__ = "0.1.0"

from .detection import DetectionModel, half_normal, spline
from .estimator import DistanceSamplingLGCP
from .inference import GridConfig, PosteriorFit, fit, laplace_fit, latent_marginals, sample_latent
from .integration import IntegrationScheme, Transect, build_scheme
from .mesh import TriMesh, build_mesh, read_mesh, write_mesh
from .model import CovariateField, Detections, ModelSpec, SurveyData, center_covariate
from .predict import abundance, intensity_surface, rwpci, variance_decomposition
from .simulate import TruthConfig, simulate_survey

__all__ = [
    "__version__",
    "DetectionModel",
    "half_normal",
    "spline",
    "DistanceSamplingLGCP",
    "GridConfig",
    "PosteriorFit",
    "fit",
    "laplace_fit",
    "latent_marginals",
    "sample_latent",
    "IntegrationScheme",
    "Transect",
    "build_scheme",
    "TriMesh",
    "build_mesh",
    "read_mesh",
    "write_mesh",
    "CovariateField",
    "Detections",
    "ModelSpec",
    "SurveyData",
    "center_covariate",
    "abundance",
    "intensity_surface",
    "rwpci",
    "variance_decomposition",
    "TruthConfig",
    "simulate_survey",
]
