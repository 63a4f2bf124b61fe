"""Acceptance suite: one recorded pass/fail line per criterion.

Every tolerance below is pinned. Each test records its outcome through
``_report.record`` before asserting, so the terminal summary lists all nine
criteria even when some fail.
"""

import math
import time

import numpy as np
import pytest

from _report import record
from conftest import grid_mesh
from helpers import random_latent, random_problem
from oracles import brute_loglik, dense_strip_integral, mala
from dslgcp.detection import detect_prob, half_normal, monotone_filter, spline
from dslgcp.inference import GridConfig, fit, laplace_fit, latent_marginals, sample_latent
from dslgcp.integration import Transect, build_scheme, integral
from dslgcp.io import read_csv, write_decomposition
from dslgcp.linalg import SparseCholesky
from dslgcp.mesh import assemble_fem, refine_uniform
from dslgcp.model import (
    CovariateField,
    ModelSpec,
    PointProcessLikelihood,
    center_covariate,
    centered_fields,
    recommended_R,
)
from dslgcp.predict import intensity_surface, variance_decomposition
from dslgcp.simulate import TruthConfig, simulate_survey
from dslgcp.spde import SQRT8, default_prior, precision, sample_gmrf
from dslgcp.tutorial import TUTORIAL_DIR, compare_outputs, run_pipeline

pytestmark = pytest.mark.acceptance


def _full_coverage(n_lines, half_width, year=1):
    """Horizontal transects whose strips tile the unit square."""
    ys = (np.arange(n_lines) + 0.5) / n_lines
    return [Transect(f"t{k}", [(0.0, y), (1.0, y)], year, half_width) for k, y in enumerate(ys)]


# ------------------------------------------------------------------ 1


def test_matern_anchor():
    t0 = time.perf_counter()
    rho, sigma = 0.25, 1.0
    h = rho / 10
    n = int(round((1 + 2 * rho) / h))
    mesh = grid_mesh(n, x0=-rho, y0=-rho, x1=1 + rho, y1=1 + rho)
    kappa = SQRT8 / rho
    tau = 1 / math.sqrt(4 * math.pi * kappa**2 * sigma**2)
    Q = precision(assemble_fem(mesh), tau=tau, kappa=kappa).Q
    V = mesh.vertices
    inner = np.all((V >= 0) & (V <= 1), axis=1)
    target = 1 / (4 * math.pi * kappa**2 * tau**2)

    fac = SparseCholesky(Q)
    exact_var = fac.inv_diag()
    X = sample_gmrf(Q, seed=1, size=4000)
    emp_var = X.var(axis=0)
    c = int(np.argmin(np.linalg.norm(V - 0.5, axis=1)))
    at = np.isclose(np.linalg.norm(V - V[c], axis=1), rho)
    e = np.zeros(len(V))
    e[c] = 1.0
    exact_corr = fac.solve(e)[at] / np.sqrt(exact_var[at] * exact_var[c])
    emp_corr = (X[:, at] * X[:, [c]]).mean(axis=0) / np.sqrt(emp_var[at] * emp_var[c])
    elapsed = time.perf_counter() - t0

    var_dev = np.abs(exact_var[inner] / target - 1).max()
    emp_dev = abs(emp_var[inner].mean() / target - 1)
    ok = (
        var_dev <= 0.10
        and emp_dev <= 0.10
        and np.all(np.abs(exact_corr - 0.13) <= 0.03)
        and abs(emp_corr.mean() - 0.13) <= 0.03
        and elapsed <= 60
    )
    record(1, "Matern anchor", ok,
           f"max exact variance deviation {var_dev:.3f}, empirical {emp_dev:.3f}; correlation at rho "
           f"{exact_corr.min():.4f}..{exact_corr.max():.4f} exact, {emp_corr.mean():.4f} empirical; {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 2


def test_integration_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, monotone = 0.0, 0
    for _ in range(50):
        b = rng.normal(size=2)
        b *= rng.uniform(0.3, 2.0) / np.linalg.norm(b)
        a = rng.normal()
        efold = 1 / np.linalg.norm(b)

        def loglam(P, a=a, b=b):
            return a + P @ b

        mesh = grid_mesh(int(math.ceil(math.sqrt(2) / (0.3 * efold))))  # diagonal edge <= 0.3 efold
        hw = rng.uniform(0.005, 0.03)
        wp = rng.uniform(0.1, 0.9, (rng.integers(2, 4), 2))
        tr = Transect("t", wp, 0, hw)
        g = half_normal(rng.uniform(0.3, 2) * hw, hw)
        ref = dense_strip_integral(lambda P: np.exp(loglam(P)), wp, hw, lambda z: detect_prob(g, z), lateral=True)
        errs = []
        m = mesh
        for R in (10, 20, 40):
            got = integral(build_scheme(m, [tr], R=R), loglam(m.vertices), g)[1]
            errs.append(abs(got - ref) / ref)
            m, _ = refine_uniform(m)
        worst = max(worst, errs[0])
        monotone += errs[0] > errs[1] > errs[2]
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.01 and monotone == 50 and elapsed <= 120
    record(2, "integration oracle", ok,
           f"worst relative error {worst:.4f}; strictly decreasing in {monotone}/50; {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 3


def test_likelihood_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(33)
    mesh = grid_mesh(3)
    worst, gworst = 0.0, 0.0
    for i in range(20):
        kind = "half_normal" if i % 2 == 0 else "spline"
        spec, data = random_problem(rng, mesh, n_det=int(rng.integers(0, 4)), kind=kind, site="observed")
        sch = build_scheme(mesh, data.transects, R=101)
        lik = PointProcessLikelihood(spec, data, sch)
        x = random_latent(rng, spec)
        x[0] = rng.uniform(1.5, 3.5)
        lay = spec.layout
        yi = {y: j for j, y in enumerate(sch.years)}
        covs = [np.ones((mesh.n_vertices, len(sch.years)))]
        covs += [spec.covariates[n].columns(sch.years) for n in spec.fixed_effects]
        coef = x[lay.detect]

        def g(z, coef=coef, spec=spec):
            return detect_prob(spec.detection, z, coef)

        def log_g(z, coef=coef, spec=spec):
            return float(np.log(detect_prob(spec.detection, z, coef)))

        d = data.detections
        ref = brute_loglik(
            mesh.vertices, mesh.triangles, x[lay.beta], covs, x[lay.field], d.xy, d.z, [yi[y] for y in d.year],
            [(t.waypoints, t.half_width, yi[t.year]) for t in data.transects], g, log_g,
        )
        worst = max(worst, abs(lik.value(x) - ref) / abs(ref))
        gr = lik.gradient(x)
        step = 1e-5
        fd = np.array([(lik.value(x + step * e) - lik.value(x - step * e)) / (2 * step) for e in np.eye(len(x))])
        gworst = max(gworst, np.max(np.abs(fd - gr)) / max(1.0, np.max(np.abs(gr))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.01 and gworst <= 1e-5 and elapsed <= 60
    record(3, "likelihood oracle", ok,
           f"worst relative loglik error {worst:.2e}; gradient {gworst:.2e}; {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 4


def _survey_spec(mesh, hw, covariates=None, fixed=(), field=True):
    return ModelSpec(mesh, half_normal(1.0, hw), covariates or {}, fixed, field=field, detection_site="observed")


def test_laplace_vs_mcmc():
    t0 = time.perf_counter()
    mesh = grid_mesh(9)  # 100 vertices
    prior = default_prior(mesh)
    hw = 0.05
    trs = _full_coverage(10, hw)
    sch = build_scheme(mesh, trs)
    spec = _survey_spec(mesh, hw)
    true_field = (prior.sigma0, prior.rho0)  # theta = (0, 0)

    def simulate(seed):
        truth = TruthConfig(mesh, trs, half_normal(0.6 * hw, hw), {"intercept": math.log(600.0)},
                            field=true_field, seed=seed)
        return simulate_survey(truth)[0]

    # posterior means at the true theta against MALA in whitened coordinates
    data = simulate(0)
    a = laplace_fit(spec, data, sch, (0.0, 0.0))
    lik = PointProcessLikelihood(spec, data, sch)
    Q = spec.prior_precision((0.0, 0.0))
    d = spec.layout.n
    M = a.factor.solve_Lt(np.eye(d))  # x = mode + M u has identity Laplace covariance in u

    def logp_grad(U):
        X = a.mode[None, :] + U @ M.T
        E = np.exp(lik.A_int @ X.T) * lik.weights[:, None]
        QX = (Q @ X.T).T
        lp = X @ lik.obs_sum - E.sum(axis=0) + lik.const - 0.5 * np.sum(X * QX, axis=1)
        return lp, (lik.obs_sum[None, :] - (lik.A_int.T @ E).T - QX) @ M

    n_chains, n_steps, burn = 200, 5500, 500
    m1, _, acc = mala(logp_grad, np.random.default_rng(1).standard_normal((n_chains, d)), n_steps + burn,
                      1.6 * d ** (-1 / 3), seed=2, burn=burn)
    z = (M @ m1.mean(axis=0)) / a.marginal_sd()
    k = int(np.argmax(np.abs(z)))
    mean_ok = np.abs(z).max() <= 0.1

    # evidence ranking of the true cell over replicates
    hits = 0
    for s in range(20):
        f = fit(spec, simulate(100 + s), sch, GridConfig(n_points=7))
        c = int(np.argmin(np.abs(f.grid.points).sum(axis=1)))
        hits += int(np.sum(f.grid.log_posterior > f.grid.log_posterior[c])) < 3
    rank_ok = hits >= 16
    elapsed = time.perf_counter() - t0
    ok = mean_ok and rank_ok and elapsed <= 20 * 60
    record(4, "Laplace vs MCMC", ok,
           f"{len(data.detections)} detections, {n_chains * n_steps} MALA steps (acceptance {acc:.2f}); "
           f"max |mean difference| {np.abs(z).max():.3f} sd at {spec.layout.component_names()[k]}; "
           f"true theta in top 3 in {hits}/20; {elapsed:.0f} s")
    assert ok


# ------------------------------------------------------------------ 5


def test_parameter_recovery():
    t0 = time.perf_counter()
    mesh = grid_mesh(9)
    prior = default_prior(mesh)
    hw = 0.05
    trs = _full_coverage(10, hw)
    sch = build_scheme(mesh, trs)
    x, y = mesh.vertices.T
    cov = {"c": CovariateField("c", (2 * x - 1 + 0.5 * np.cos(math.pi * y))[:, None], (1,))}
    spec = _survey_spec(mesh, hw, cov, ("c",))
    beta = {"intercept": math.log(600.0), "c": 0.75}
    tv = np.array([beta["intercept"], beta["c"]])
    hits = np.zeros(2, dtype=int)
    for s in range(20):
        truth = TruthConfig(mesh, trs, half_normal(0.6 * hw, hw), beta, covariates=cov,
                            field=(0.5, prior.rho0), seed=200 + s)
        f = fit(spec, simulate_survey(truth)[0], sch, GridConfig(n_points=7))
        q = latent_marginals(f, probs=(0.05, 0.95), components=[0, 1]).quantiles
        hits += (q[:, 0] <= tv) & (tv <= q[:, 1])
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(hits >= 16)) and elapsed <= 30 * 60
    record(5, "parameter recovery", ok,
           f"90% interval coverage intercept {hits[0]}/20, covariate {hits[1]}/20; {elapsed:.0f} s")
    assert ok


# ------------------------------------------------------------------ 6


def test_detection_recovery():
    t0 = time.perf_counter()
    mesh = grid_mesh(6)
    hw = 0.05
    trs = _full_coverage(5, hw)
    spec = ModelSpec(mesh, spline(hw, p=5), {}, (), field=False)
    sch = build_scheme(mesh, trs, R=recommended_R(spec.detection))
    true = half_normal(0.5 * hw, hw)
    z = np.linspace(0, 0.8 * hw, 41)
    g_true = detect_prob(true, z)
    good, n_det, kept, total = 0, [], 0, 0
    for s in range(20):
        data = simulate_survey(TruthConfig(mesh, trs, true, {"intercept": math.log(4000.0)}, seed=300 + s))[0]
        n_det.append(len(data.detections))
        f = fit(spec, data, sch, GridConfig())
        S = sample_latent(f, 2000, seed=s)[:, spec.layout.detect]
        g_med = np.median(detect_prob(spec.detection, z, S), axis=1)
        good += np.abs(g_med - g_true).max() <= 0.1
        kept += len(monotone_filter(S, spec.detection.basis))
        total += len(S)
    elapsed = time.perf_counter() - t0
    ok = good >= 16 and min(n_det) >= 150 and kept / total >= 0.5 and elapsed <= 15 * 60
    record(6, "detection recovery", ok,
           f"median g within 0.1 in {good}/20 ({min(n_det)}..{max(n_det)} detections); "
           f"monotone filter keeps {kept / total:.2f}; {elapsed:.0f} s")
    assert ok


# ------------------------------------------------------------------ 7


def test_centering_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    mesh = grid_mesh(8)
    w = assemble_fem(mesh).mass_lumped
    worst, equiv = 0.0, 0.0
    for _ in range(100):
        T = int(rng.integers(2, 6))
        X = rng.normal(rng.normal(0, 10), rng.uniform(0.1, 5), (mesh.n_vertices, T))
        c = center_covariate(CovariateField("s", X, tuple(range(T))), mesh)
        rec = c.overall + c.yearly[None, :] + c.spatial[:, None] + c.residual
        worst = max(
            worst,
            np.abs(rec - X).max(),
            abs(c.yearly.sum()),
            abs(c.spatial @ w) / w.sum(),
            np.abs(c.residual.mean(axis=1)).max(),
            np.abs(c.residual.T @ w).max() / w.sum(),
            np.abs(c.within_year - c.spatial[:, None] - c.residual).max(),
        )
        f1, f2 = centered_fields(c, "within-year"), centered_fields(c, "space-time")
        b_t, b = rng.normal(size=2)
        eta1 = b_t * f1["s_t"].values + b * f1["s_cwy"].values
        eta2 = b_t * f2["s_t"].values + b * f2["s_s"].values + b * f2["s_res"].values
        # equal up to floating-point rounding of the two summation orders
        equiv = max(equiv, np.abs(eta1 - eta2).max() / (np.spacing(1.0) * max(1.0, np.abs(eta1).max())))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and equiv <= 16 and elapsed <= 10
    record(7, "centering identities", ok,
           f"largest identity residual {worst:.1e}; Model 1 vs 2 difference {equiv:.1f} ulp; {elapsed:.2f} s")
    assert ok


# ------------------------------------------------------------------ 8


def test_rwpci_and_decomposition(tmp_path):
    t0 = time.perf_counter()
    mesh = grid_mesh(9)
    hw = 0.05
    trs = _full_coverage(10, hw)
    sch = build_scheme(mesh, trs)
    x, y = mesh.vertices.T
    cov = {"c": CovariateField("c", (2 * x - 1 + 0.5 * np.cos(math.pi * y))[:, None], (1,))}
    beta = {"intercept": math.log(6000.0), "c": 0.75}

    # many detections and no field: the posterior of lambda is close to Gaussian
    truth = TruthConfig(mesh, trs, half_normal(0.6 * hw, hw), beta, covariates=cov, seed=400)
    f = fit(_survey_spec(mesh, hw, cov, ("c",), field=False), simulate_survey(truth)[0], sch, GridConfig())
    s = intensity_surface(f, n_samples=20000, seed=1)
    ratio = s.rwpci / (1.35 * s.sd / s.median)
    rw_dev = np.abs(ratio - 1).max()

    # decomposition with the field: V_eta from one batch, the parts from an independent one
    truth = TruthConfig(mesh, trs, half_normal(0.6 * hw, hw), {**beta, "intercept": math.log(600.0)},
                        covariates=cov, field=(0.5, default_prior(mesh).rho0), seed=401)
    f = fit(_survey_spec(mesh, hw, cov, ("c",)), simulate_survey(truth)[0], sch, GridConfig())
    da = variance_decomposition(f, n_samples=4000, seed=2)
    db = variance_decomposition(f, n_samples=4000, seed=3)
    pts = np.random.default_rng(8).choice(mesh.n_vertices, 100, replace=False)
    diff = da.V_eta[pts, 0] - (db.V_beta + db.V_xi + 2 * db.C)[pts, 0]
    se = np.sqrt(da.se_V_eta[pts, 0] ** 2 + db.se_V_eta[pts, 0] ** 2)
    z_max = np.abs(diff / se).max()
    same = np.abs(da.V_eta - (da.V_beta + da.V_xi + 2 * da.C)).max()
    out = tmp_path / "decomposition.csv"
    write_decomposition(out, [("model", da.table_row())])
    rho = float(read_csv(out)[0][0]["rho"])
    elapsed = time.perf_counter() - t0
    ok = rw_dev <= 0.10 and z_max <= 3 and same <= 1e-12 and -1 <= rho <= 1 and elapsed <= 60
    record(8, "RWPCI anchor", ok,
           f"max RWPCI deviation from 1.35 sd/median {rw_dev:.3f}; decomposition max |z| {z_max:.2f} "
           f"over 100 points; rho {rho:.3f}; {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 9


def test_tutorial_determinism(tmp_path):
    t0 = time.perf_counter()
    run_pipeline(TUTORIAL_DIR / "config.ini", tmp_path)
    problems = compare_outputs(TUTORIAL_DIR / "golden", tmp_path)
    rows, _ = read_csv(tmp_path / "abundance.csv")
    truth = dict(line.split(" = ") for line in (tmp_path / "truth.txt").read_text().splitlines() if " = " in line)
    covered = sum(float(r["q2.5"]) <= float(truth[f"abundance.{r['year']}"]) <= float(r["q97.5"]) for r in rows)
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed <= 600
    record(9, "end-to-end determinism", ok,
           f"{len(problems)} differences from the golden files; abundance intervals cover the truth in "
           f"{covered}/{len(rows)} years; {elapsed:.1f} s")
    assert ok, "\n".join(problems[:20])
