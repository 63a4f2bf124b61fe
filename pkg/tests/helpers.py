"""Builders for small random survey problems."""

import numpy as np

from dslgcp.detection import half_normal, spline
from dslgcp.integration import Transect, polyline_distance
from dslgcp.model import CovariateField, Detections, ModelSpec, SurveyData


def random_transects(rng, years, per_year=2, half_width=0.05, lo=0.1, hi=0.9):
    out = []
    for y in years:
        for k in range(per_year):
            wp = rng.uniform(lo, hi, (rng.integers(2, 4), 2))
            out.append(Transect(f"{y}-{k}", wp, y, half_width))
    return out


def detections_near(rng, transects, n):
    """``n`` detections placed inside the strips of randomly chosen transects."""
    ids, xy, yrs, tids, zs = [], [], [], [], []
    for i in range(n):
        tr = transects[rng.integers(len(transects))]
        W = tr.waypoints
        j = rng.integers(len(W) - 1)
        a, b = W[j], W[j + 1]
        u = (b - a) / np.linalg.norm(b - a)
        nrm = np.array([-u[1], u[0]])
        p = a + rng.uniform(0.2, 0.8) * (b - a) + rng.uniform(-0.9, 0.9) * tr.half_width * nrm
        ids.append(f"d{i}")
        xy.append(p)
        yrs.append(tr.year)
        tids.append(tr.id)
        zs.append(float(polyline_distance(p, W)[0]))
    return Detections(ids, np.array(xy).reshape(-1, 2), yrs, tids, zs)


def random_covariates(rng, mesh, years, names=("c1", "c2")):
    out = {}
    for n in names:
        out[n] = CovariateField(n, rng.normal(size=(mesh.n_vertices, len(years))), years)
    return out


def random_problem(rng, mesh, n_det=3, kind="half_normal", field=True, years=(2001, 2002), site="observed",
                   half_width=0.05):
    trs = random_transects(rng, years, half_width=half_width)
    det = detections_near(rng, trs, n_det)
    covs = random_covariates(rng, mesh, years)
    detection = half_normal(1.0, half_width) if kind == "half_normal" else spline(half_width, p=4)
    spec = ModelSpec(mesh, detection, covs, ("c1", "c2"), field=field, detection_site=site)
    return spec, SurveyData(trs, det)


def random_latent(rng, spec, scale=0.3):
    lay = spec.layout
    x = np.zeros(lay.n)
    x[lay.beta] = rng.normal(0, scale, lay.n_beta)
    x[lay.field] = rng.normal(0, scale, lay.n_field)
    hw = spec.detection.z_max
    if spec.detection.kind == "half_normal":
        x[lay.detect] = rng.uniform(0.5, 4.0) / hw**2
    else:
        x[lay.detect] = np.cumsum(rng.uniform(0, 1.0, lay.n_detect))
    return x
