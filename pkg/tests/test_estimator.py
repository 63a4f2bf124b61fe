import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import grid_mesh
from dslgcp import DistanceSamplingLGCP, Transect, TruthConfig, half_normal, simulate_survey
from dslgcp.estimator import check_points, check_survey


@pytest.fixture(scope="module")
def survey():
    mesh = grid_mesh(8)
    trs = [Transect(f"t{k}", [(0.1, y), (0.9, y)], 1, 0.04) for k, y in enumerate((0.2, 0.5, 0.8))]
    truth = TruthConfig(mesh, trs, half_normal(0.02, 0.04), {"intercept": math.log(1500.0)}, seed=3)
    data, rec = simulate_survey(truth)
    return mesh, data


@pytest.fixture(scope="module")
def fitted(survey):
    mesh, data = survey
    est = DistanceSamplingLGCP(mesh, half_width=0.04, n_points=3, n_samples=300, random_state=0)
    return est.fit(data)


def test_params_round_trip(survey):
    mesh, _ = survey
    est = DistanceSamplingLGCP(mesh, half_width=0.04, R=7)
    p = est.get_params()
    assert p["R"] == 7 and p["half_width"] == 0.04
    c = clone(est).set_params(n_points=5)
    assert c.n_points == 5 and c.R == 7


def test_fit_attributes(fitted, survey):
    _, data = survey
    assert fitted.years_ == (1,)
    assert set(fitted.coef_) == {"intercept", "beta_g[0]"}
    assert fitted.theta_weights_.sum() == pytest.approx(1.0)
    # intercept within a few sd of the truth
    assert abs(fitted.coef_["intercept"] - math.log(1500.0)) < 4 * fitted.coef_sd_["intercept"] + 0.5
    assert len(data.detections) > 20


def test_predict_matches_surface_at_vertices(fitted, survey):
    mesh, _ = survey
    idx = [0, 10, 40]
    got = fitted.predict(mesh.vertices[idx])
    surf = fitted.predict_surface()
    np.testing.assert_allclose(got, surf.median[idx, 0], rtol=1e-12)
    assert fitted.sample(5).shape == (5, fitted.spec_.layout.n)


def test_input_validation(fitted):
    with pytest.raises(ValueError):
        check_points(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        check_points([[np.nan, 0.0]])
    with pytest.raises(TypeError):
        check_survey([1, 2, 3])
    with pytest.raises(TypeError):
        check_survey(([1], None))
    with pytest.raises(NotFittedError):
        DistanceSamplingLGCP(grid_mesh(2)).predict([[0.5, 0.5]])
    with pytest.raises(ValueError, match="unknown detection"):
        DistanceSamplingLGCP(grid_mesh(2), detection="hazard")._spec((1,))
