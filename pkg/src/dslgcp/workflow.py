"""Pipeline stages behind the command-line interface.

Each stage reads its inputs from the run configuration, writes its
outputs to the output directory and returns a small dict describing what
it produced.
"""

from __future__ import annotations

import logging
import math
import warnings

import numpy as np

from .config import ConfigError, RunConfig
from .detection import detect_prob, half_normal, monotone_filter, negative_G_fraction, spline
from .inference import GaussianApprox, GridConfig, PosteriorFit, ThetaGrid, fit, latent_marginals, sample_latent
from .integration import Transect, build_scheme, strip_distance
from .io import (
    load_fit_arrays,
    make_provenance,
    read_covariates,
    read_detections,
    read_transects,
    save_fit,
    write_covariates,
    write_csv,
    write_decomposition,
    write_detection_curve,
    write_detections,
    write_marginals,
    write_scheme,
    write_summary_table,
    write_surface,
    write_theta_grid,
    write_transects,
    write_triangles,
)
from .linalg import SparseCholesky
from .mesh import TriMesh, assemble_fem, build_mesh, mesh_quality, read_mesh, region_weights, write_mesh
from .model import (
    CovariateField,
    ModelSpec,
    SpecError,
    SurveyData,
    center_covariate,
    centered_fields,
    coordinate_covariates,
    validate_survey,
)
from .predict import abundance, intensity_surface, variance_decomposition
from .simulate import TruthConfig, simulate_survey
from .spde import SQRT8, SpdePrior, precision

__all__ = [
    "run_mesh",
    "run_simulate",
    "run_center",
    "run_fit",
    "run_predict",
    "run_diagnose",
    "load_inputs",
    "build_spec",
    "restore_fit",
]

log = logging.getLogger(__name__)

# stage identifiers mixed into the root seed so stages draw independent streams
_STAGE = {"simulate": 1, "covariate": 2, "fit": 3, "predict": 4}


def _seed(cfg: RunConfig, stage: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([cfg.seed, _STAGE[stage]])


def _prov(cfg: RunConfig, command: str) -> dict:
    return make_provenance(cfg.config_text, cfg.seed, command=command)


def _write_kv(path, items: dict, provenance: dict) -> None:
    lines = [f"# {k}: {v}" for k, v in provenance.items()]
    lines += [f"{k} = {v}" for k, v in items.items()]
    path.write_text("\n".join(lines) + "\n")


def _ensure_output(cfg: RunConfig):
    cfg.output.mkdir(parents=True, exist_ok=True)


# -------------------------------------------------------------------- mesh


def load_mesh(cfg: RunConfig) -> TriMesh:
    p = cfg.default_mesh_path
    if not p.is_file():
        raise ConfigError(f"mesh file {p} not found; run the mesh command first or set [paths] mesh")
    return read_mesh(p)


def run_mesh(cfg: RunConfig) -> dict:
    if cfg.boundary is None or cfg.max_edge is None:
        raise ConfigError("[mesh] boundary and max_edge are required")
    _ensure_output(cfg)
    mesh = build_mesh(
        cfg.boundary, cfg.max_edge, inner_region=cfg.inner_region,
        inner_max_edge=cfg.inner_max_edge, min_angle=cfg.min_angle,
    )
    prov = _prov(cfg, "mesh")
    write_mesh(mesh, cfg.output / "mesh.txt", extra_header=prov)
    q = mesh_quality(mesh)
    _write_kv(cfg.output / "mesh_quality.txt", q, prov)
    return {"mesh": mesh, "quality": q}


# -------------------------------------------------------------- covariates


def synthetic_covariate(mesh: TriMesh, name: str, years, seed) -> CovariateField:
    """A smooth space-time covariate with yearly, spatial and interaction parts."""
    rng = np.random.default_rng(seed)
    fem = assemble_fem(mesh)
    rho = mesh.bbox_diameter() / 3.0
    kappa = SQRT8 / rho
    tau = 1.0 / math.sqrt(4 * math.pi * kappa**2)
    fac = SparseCholesky(precision(fem, tau=tau, kappa=kappa).Q)
    y = mesh.vertices[:, 1]
    trend = 1.5 * (y - y.mean()) / max(np.ptp(y), 1e-12)
    shared = fac.solve_Lt(rng.standard_normal(mesh.n_vertices))
    yearly = rng.normal(0.0, 0.8, len(years))
    cols = []
    for j in range(len(years)):
        inter = fac.solve_Lt(rng.standard_normal(mesh.n_vertices))
        cols.append(20.0 + yearly[j] + trend + 0.7 * shared + 0.3 * inter)
    return CovariateField(name, np.column_stack(cols), tuple(years))


def _raw_covariates(cfg: RunConfig, mesh: TriMesh) -> dict:
    p = cfg.default_covariates_path
    return read_covariates(p, mesh) if p.is_file() else {}


def model_covariates(cfg: RunConfig, mesh: TriMesh, years, raw: dict) -> dict:
    """Built-in coordinates, raw covariates, and centered components if configured."""
    covs = coordinate_covariates(mesh, years)
    covs.update(raw)
    if cfg.centering != "none":
        name = cfg.centered_covariate
        if name not in raw:
            raise SpecError(f"centered covariate {name!r} not found among {sorted(raw)}")
        covs.update(centered_fields(_center(cfg, mesh, raw[name], years), cfg.centering))
    return covs


def _center(cfg, mesh, cov, years):
    w = region_weights(mesh, cfg.region) if cfg.region is not None else None
    return center_covariate(cov, mesh, weights=w, years=years)


# --------------------------------------------------------------- simulate


def _layout(cfg: RunConfig, mesh: TriMesh, years) -> list:
    poly = cfg.region or cfg.inner_region
    if poly is None:
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    else:
        P = np.asarray(poly)
        lo, hi = P.min(axis=0), P.max(axis=0)
    span = hi - lo
    x0, x1 = lo[0] + 0.05 * span[0], hi[0] - 0.05 * span[0]
    k = cfg.sim_lines_per_year
    out = []
    for j, yr in enumerate(years):
        offset = (j + 0.5) / (len(years) + 1) / (k + 1)
        for i in range(k):
            yy = lo[1] + span[1] * ((i + 0.5) / (k + 1) + offset)
            out.append(Transect(f"{yr}-{i:02d}", [(x0, yy), (x1, yy)], yr, cfg.half_width))
    return out


def run_simulate(cfg: RunConfig) -> dict:
    _ensure_output(cfg)
    mesh = load_mesh(cfg)
    if cfg.sim_sigma_g is None:
        raise ConfigError("[simulate] sigma_g is required")
    if cfg.transects_path is not None and cfg.transects_path.is_file():
        transects = read_transects(cfg.transects_path, cfg.half_width)
        years = tuple(sorted({t.year for t in transects}))
    else:
        years = cfg.sim_years
        if not years:
            raise ConfigError("[simulate] years is required when no transect file is given")
        transects = _layout(cfg, mesh, years)
    raw = {}
    if cfg.covariates_path is not None and cfg.covariates_path.is_file():
        raw = read_covariates(cfg.covariates_path, mesh)
    if cfg.sim_synthetic_covariate:
        name = cfg.sim_synthetic_covariate
        raw[name] = synthetic_covariate(mesh, name, years, _seed(cfg, "covariate"))
    covs = model_covariates(cfg, mesh, years, raw)
    try:
        truth = TruthConfig(
            mesh, transects, half_normal(cfg.sim_sigma_g, cfg.half_width), dict(cfg.sim_beta), covs,
            field=cfg.sim_field, seed=int(_seed(cfg, "simulate").generate_state(1)[0]), years=years,
        )
    except ValueError as exc:
        raise ConfigError(f"[simulate] {exc}; available covariates: {sorted(covs)}") from exc
    data, rec = simulate_survey(truth, R=cfg.R)
    prov = _prov(cfg, "simulate")
    write_transects(cfg.output / "transects.csv", transects, prov)
    write_detections(cfg.output / "detections.csv", data.detections, prov)
    if cfg.sim_synthetic_covariate:
        write_covariates(cfg.output / "covariates.csv", [raw[cfg.sim_synthetic_covariate]], prov)
    text = "".join(f"# {k}: {v}\n" for k, v in prov.items()) + rec.as_text()
    if cfg.abundance_region is not None:
        w = region_weights(mesh, cfg.abundance_region)
        for j, y in enumerate(years):
            text += f"abundance.{y} = {float(np.exp(rec.log_lambda[:, j]) @ w)!r}\n"
    (cfg.output / "truth.txt").write_text(text)
    return {"data": data, "truth": rec}


# ----------------------------------------------------------------- center


def run_center(cfg: RunConfig) -> dict:
    _ensure_output(cfg)
    if not cfg.centered_covariate:
        raise ConfigError("[model] centered_covariate is required for centering")
    mesh = load_mesh(cfg)
    raw = _raw_covariates(cfg, mesh)
    if cfg.centered_covariate not in raw:
        raise SpecError(f"covariate {cfg.centered_covariate!r} not found in the covariate file")
    cov = raw[cfg.centered_covariate]
    c = _center(cfg, mesh, cov, cov.years)
    name = c.name
    parts = [
        CovariateField(f"{name}_t", np.repeat(c.yearly[None, :], mesh.n_vertices, axis=0), c.years),
        CovariateField(f"{name}_s", c.spatial, c.years),
        CovariateField(f"{name}_cwy", c.within_year, c.years),
        CovariateField(f"{name}_res", c.residual, c.years),
    ]
    prov = dict(_prov(cfg, "center"), overall_mean=format(c.overall, ".17g"))
    write_covariates(cfg.output / f"centered_{name}.csv", parts, prov)
    write_csv(cfg.output / f"yearly_{name}.csv", ["year", "centered_mean"], zip(c.years, c.yearly), prov)
    return {"centered": c}


# -------------------------------------------------------------------- fit


def load_inputs(cfg: RunConfig):
    """Mesh, survey data and model covariates, validated."""
    mesh = load_mesh(cfg)
    tp = cfg.default_transects_path
    dp = cfg.default_detections_path
    if not tp.is_file():
        raise ConfigError(f"transect file {tp} not found")
    if not dp.is_file():
        raise ConfigError(f"detection file {dp} not found")
    transects = read_transects(tp, cfg.half_width)
    det = read_detections(dp)
    data = SurveyData(transects, det)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        offenders = validate_survey(mesh, data, recompute=cfg.recompute_distances)
    for w in caught:
        log.warning("%s", w.message)
    covs = model_covariates(cfg, mesh, data.years, _raw_covariates(cfg, mesh))
    return mesh, data, covs, offenders


def build_spec(cfg: RunConfig, mesh: TriMesh, covs: dict) -> ModelSpec:
    if cfg.detection == "half_normal":
        det = half_normal(1.0, cfg.half_width)
    else:
        det = spline(cfg.half_width, p=cfg.spline_p)
    rho0 = cfg.prior_rho0 if cfg.prior_rho0 is not None else mesh.bbox_diameter() / 5.0
    prior = SpdePrior(cfg.prior_sigma0, rho0, cfg.var_log_sigma, cfg.var_log_rho)
    return ModelSpec(
        mesh, det, covs, cfg.fixed_effects, intercept=cfg.intercept, field=cfg.field,
        spde_prior=prior, beta_prec=cfg.beta_prec, var_log_gamma=cfg.var_log_gamma,
        detection_site=cfg.detection_site,
    )


def _grid(cfg: RunConfig) -> GridConfig:
    return GridConfig(n_points=cfg.n_points, n_gamma=cfg.n_gamma, width=cfg.grid_width)


def detection_curve(fit_: PosteriorFit, samples, n_z: int = 101):
    """Posterior median and 95% band of ``g`` on a grid; spline draws are monotone-filtered."""
    spec = fit_.spec
    det = spec.detection
    coef = samples[:, spec.layout.detect]
    kept = 1.0
    if det.kind == "spline":
        filtered = monotone_filter(coef, det.basis)
        kept = len(filtered) / max(len(coef), 1)
        if len(filtered):
            coef = filtered
    z = np.linspace(0.0, det.z_max, n_z)
    G = detect_prob(det, z, coef)  # (n_z, n_samples)
    lo, med, hi = np.quantile(G, [0.025, 0.5, 0.975], axis=1)
    return z, med, lo, hi, kept


def run_fit(cfg: RunConfig) -> dict:
    _ensure_output(cfg)
    mesh, data, covs, offenders = load_inputs(cfg)
    spec = build_spec(cfg, mesh, covs)
    scheme = build_scheme(mesh, data.transects, R=cfg.R, years=data.years, subdivide=cfg.subdivide)
    prov = _prov(cfg, "fit")
    res = fit(spec, data, scheme, _grid(cfg), workers=cfg.workers, provenance=prov)
    save_fit(cfg.output / "fit.npz", res)
    write_theta_grid(cfg.output / "theta_grid.csv", res, prov)
    marg = latent_marginals(res)
    write_marginals(cfg.output / "marginals.csv", marg, prov)
    lay = spec.layout
    rows = list(range(lay.n_beta)) + list(range(lay.detect.start, lay.n))
    write_summary_table(cfg.output / "summary_table.csv", cfg.model_name, marg, rows, prov)
    samples = sample_latent(res, cfg.n_samples, seed=_seed(cfg, "fit"))
    z, med, lo, hi, kept = detection_curve(res, samples)
    write_detection_curve(cfg.output / "detection_curve.csv", z, med, lo, hi, prov)
    write_scheme(cfg.output / "scheme.csv", scheme, prov)
    return {"fit": res, "marginals": marg, "monotone_kept": kept, "offenders": offenders}


# ---------------------------------------------------------------- predict


def restore_fit(cfg: RunConfig):
    """Rebuild the posterior from ``fit.npz`` and the configured inputs."""
    p = cfg.output / "fit.npz"
    if not p.is_file():
        raise ConfigError(f"fit artifact {p} not found; run the fit command first")
    mesh, data, covs, _ = load_inputs(cfg)
    spec = build_spec(cfg, mesh, covs)
    scheme = build_scheme(mesh, data.transects, R=cfg.R, years=data.years, subdivide=cfg.subdivide)
    arr = load_fit_arrays(p)
    stored = arr["provenance"].get("config_sha256")
    current = make_provenance(cfg.config_text)["config_sha256"]
    if stored and stored != current:
        log.warning("fit artifact was produced from a different config (hash %s)", stored[:12])
    approxs = []
    for k, item in enumerate(arr["approxs"]):
        if item is None:
            approxs.append(None)
            continue
        mode, H, diag = item
        if len(mode) != spec.layout.n:
            raise SpecError("fit artifact does not match the configured model")
        approxs.append(GaussianApprox(arr["theta"][k], mode, H, SparseCholesky(H), diag[0], diag[1], int(diag[2]), diag[3]))
    axes = [np.unique(arr["theta"][:, j]) for j in range(arr["theta"].shape[1])]
    grid = ThetaGrid(arr["names"], axes, arr["theta"], arr["log_posterior"], arr["weights"])
    return PosteriorFit(spec, data, scheme, grid, approxs, arr["provenance"])


def run_predict(cfg: RunConfig) -> dict:
    _ensure_output(cfg)
    res = restore_fit(cfg)
    spec = res.spec
    years = res.scheme.years
    prov = _prov(cfg, "predict")
    samples = sample_latent(res, cfg.n_samples, seed=_seed(cfg, "predict"))
    surf = intensity_surface(res, samples=samples, years=years)
    write_surface(cfg.output / "surface.csv", surf, prov)
    write_triangles(cfg.output / "triangles.csv", spec.mesh, prov)
    out = {"surface": surf}
    region = cfg.abundance_region or cfg.region or cfg.inner_region
    if region is not None:
        rows = []
        yearly = None
        if cfg.centering != "none":
            yearly = spec.covariates[f"{cfg.centered_covariate}_t"].values[0]
            yidx = {y: j for j, y in enumerate(spec.covariates[f"{cfg.centered_covariate}_t"].years)}
        abund = {}
        for y in years:
            a = abundance(res, region, y, samples=samples)
            abund[y] = a
            cov_t = float(yearly[yidx[y]]) if yearly is not None else None
            rows.append((y, a.median, a.lower, a.upper, a.area, a.median / a.area, a.lower / a.area, a.upper / a.area, cov_t))
        write_csv(
            cfg.output / "abundance.csv",
            ["year", "median", "q2.5", "q97.5", "area", "density_median", "density_q2.5", "density_q97.5", "covariate_t"],
            rows, prov,
        )
        out["abundance"] = abund
    w = region_weights(spec.mesh, cfg.region) if cfg.region is not None else None
    vd = variance_decomposition(res, samples=samples, years=years, weights=w)
    write_decomposition(cfg.output / "decomposition.csv", [(cfg.model_name, vd.table_row())], prov)
    out["decomposition"] = vd
    return out


# --------------------------------------------------------------- diagnose


def run_diagnose(cfg: RunConfig) -> dict:
    _ensure_output(cfg)
    res = restore_fit(cfg)
    data, scheme, spec = res.data, res.scheme, res.spec
    det = data.detections
    items: dict = {}
    items["n_detections"] = len(det)
    for y in scheme.years:
        items[f"detections.{y}"] = int(np.sum(det.year == y))
    cons = abs(scheme.weight.sum() - scheme.surveyed_area) / max(scheme.surveyed_area, 1e-300)
    items["scheme_weight_relative_error"] = f"{cons:.3e}"
    # fraction of detections inside more than one strip
    multi = 0
    for y in scheme.years:
        rows = np.flatnonzero(det.year == y)
        trs = [t for t in data.transects if t.year == y]
        if len(rows) and trs:
            D = np.column_stack([strip_distance(det.xy[rows], t.waypoints) for t in trs])
            multi += int(np.sum((D <= np.array([t.half_width for t in trs])).sum(axis=1) > 1))
    items["strip_overlap_fraction"] = f"{multi / max(len(det), 1):.4f}"
    mesh, _, _, offenders = load_inputs(cfg)
    items["distance_mismatches_over_1m"] = len(offenders)
    ok = [a for a in res.approxs if a is not None]
    items["grid_points"] = len(res.approxs)
    items["grid_points_failed"] = len(res.approxs) - len(ok)
    items["newton_iterations_max"] = max(a.n_iter for a in ok)
    items["gradient_norm_max"] = f"{max(a.grad_norm for a in ok):.3e}"
    # weight on the edge of the grid signals a too narrow grid
    pts = res.grid.points
    if pts.size:
        edge = np.zeros(len(pts), dtype=bool)
        for j, ax in enumerate(res.grid.axes):
            if len(ax) > 1:
                edge |= np.isclose(pts[:, j], ax.min()) | np.isclose(pts[:, j], ax.max())
        items["grid_edge_weight"] = f"{res.grid.weights[edge].sum():.4g}"
    items["theta_posterior_mean"] = ", ".join(f"{v:.4f}" for v in res.theta_mean())
    if spec.detection.kind == "spline":
        samples = sample_latent(res, cfg.n_samples, seed=_seed(cfg, "fit"))
        coef = samples[:, spec.layout.detect]
        _, mask = monotone_filter(coef, spec.detection.basis, return_mask=True)
        items["monotone_retained_fraction"] = f"{mask.mean():.4f}"
        items["negative_G_fraction"] = f"{negative_G_fraction(coef, spec.detection.basis):.4f}"
    _write_kv(cfg.output / "diagnostics.txt", items, _prov(cfg, "diagnose"))
    return items
