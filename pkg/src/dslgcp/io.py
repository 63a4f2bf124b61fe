"""CSV and artifact formats.

Every CSV written here starts with ``# key: value`` provenance lines
(config hash, seed, package version), followed by a header row. Floats are
written with 17 significant digits so that files round-trip exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import __version__
from .integration import IntegrationScheme, Transect
from .mesh import TriMesh
from .model import CovariateField, DataError, Detections

__all__ = [
    "config_hash",
    "make_provenance",
    "write_csv",
    "read_csv",
    "read_transects",
    "write_transects",
    "read_detections",
    "write_detections",
    "read_covariates",
    "write_covariates",
    "write_scheme",
    "write_surface",
    "write_triangles",
    "write_summary_table",
    "write_marginals",
    "write_theta_grid",
    "write_decomposition",
    "write_detection_curve",
    "save_fit",
    "load_fit_arrays",
]


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def make_provenance(config_text: str | None = None, seed=None, **extra) -> dict:
    prov = {"dslgcp_version": __version__}
    if config_text is not None:
        prov["config_sha256"] = config_hash(config_text)
    if seed is not None:
        prov["seed"] = seed
    prov.update(extra)
    return prov


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (float, np.floating)):
        return "NA" if np.isnan(v) else format(float(v), ".17g")
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows, provenance: dict | None = None) -> None:
    buf = _io.StringIO()
    for k, v in (provenance or {}).items():
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue())


def read_csv(path):
    """Return ``(rows as dicts, provenance dict)``."""
    prov = {}
    lines = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            if ":" in line:
                k, v = line[1:].split(":", 1)
                prov[k.strip()] = v.strip()
            continue
        if line.strip():
            lines.append(line)
    rows = list(csv.DictReader(lines))
    return rows, prov


def _year(s):
    s = str(s).strip()
    try:
        return int(s)
    except ValueError:
        return s


def _require(rows, cols, path):
    if not rows:
        return
    missing = [c for c in cols if c not in rows[0]]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")


# ---------------------------------------------------------------- transects


def read_transects(path, half_width: float) -> list[Transect]:
    """Transects CSV: transect_id, waypoint_order, x, y, year (optional half_width)."""
    rows, _ = read_csv(path)
    _require(rows, ["transect_id", "waypoint_order", "x", "y", "year"], path)
    groups: dict = {}
    for r in rows:
        groups.setdefault(r["transect_id"], []).append(r)
    out = []
    for tid, rs in groups.items():
        rs.sort(key=lambda r: int(r["waypoint_order"]))
        years = {_year(r["year"]) for r in rs}
        if len(years) != 1:
            raise DataError(f"transect {tid}: waypoints carry several years {sorted(map(str, years))}")
        hw = float(rs[0]["half_width"]) if rs[0].get("half_width") not in (None, "") else half_width
        try:
            out.append(Transect(tid, [(float(r["x"]), float(r["y"])) for r in rs], years.pop(), hw))
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    return out


def write_transects(path, transects, provenance=None) -> None:
    rows = []
    for t in transects:
        for k, (x, y) in enumerate(t.waypoints):
            rows.append((t.id, k, float(x), float(y), t.year))
    write_csv(path, ["transect_id", "waypoint_order", "x", "y", "year"], rows, provenance)


# --------------------------------------------------------------- detections


def read_detections(path) -> Detections:
    """Detections CSV: id, x, y, year, transect_id, perp_distance_km."""
    rows, _ = read_csv(path)
    if not rows:
        return Detections.empty()
    _require(rows, ["id", "x", "y", "year", "transect_id", "perp_distance_km"], path)
    try:
        return Detections(
            [r["id"] for r in rows],
            [(float(r["x"]), float(r["y"])) for r in rows],
            [_year(r["year"]) for r in rows],
            [r["transect_id"] for r in rows],
            [float(r["perp_distance_km"]) for r in rows],
        )
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_detections(path, det: Detections, provenance=None) -> None:
    rows = [
        (det.id[i], float(det.xy[i, 0]), float(det.xy[i, 1]), det.year[i], det.transect_id[i], float(det.z[i]))
        for i in range(len(det))
    ]
    write_csv(path, ["id", "x", "y", "year", "transect_id", "perp_distance_km"], rows, provenance)


# --------------------------------------------------------------- covariates


def read_covariates(path, mesh: TriMesh) -> dict:
    """Covariates CSV: vertex_id (or x, y), year, name, value.

    Rows given by coordinates instead of vertex ids are projected to the
    mesh by giving each vertex the value of the nearest supplied point.
    """
    rows, _ = read_csv(path)
    if not rows:
        return {}
    by_vertex = "vertex_id" in rows[0]
    _require(rows, ["year", "name", "value"] + ([] if by_vertex else ["x", "y"]), path)
    names = sorted({r["name"] for r in rows})
    out = {}
    for name in names:
        rs = [r for r in rows if r["name"] == name]
        years = tuple(sorted({_year(r["year"]) for r in rs}, key=lambda y: (str(type(y)), y)))
        yi = {y: j for j, y in enumerate(years)}
        V = np.full((mesh.n_vertices, len(years)), np.nan)
        if by_vertex:
            for r in rs:
                v = int(r["vertex_id"])
                if not 0 <= v < mesh.n_vertices:
                    raise DataError(f"covariate {name}: vertex_id {v} out of range")
                V[v, yi[_year(r["year"])]] = float(r["value"])
        else:
            from scipy.spatial import cKDTree

            for y in years:
                ry = [r for r in rs if _year(r["year"]) == y]
                P = np.array([(float(r["x"]), float(r["y"])) for r in ry])
                vals = np.array([float(r["value"]) for r in ry])
                _, k = cKDTree(P).query(mesh.vertices)
                V[:, yi[y]] = vals[k]
        if np.isnan(V).any():
            bad = np.argwhere(np.isnan(V))[0]
            raise DataError(f"covariate {name}: no value for vertex {bad[0]} in year {years[bad[1]]}")
        out[name] = CovariateField(name, V, years)
    return out


def write_covariates(path, fields, provenance=None) -> None:
    rows = []
    for f in fields:
        for j, y in enumerate(f.years):
            for v in range(f.values.shape[0]):
                rows.append((v, y, f.name, float(f.values[v, j])))
    write_csv(path, ["vertex_id", "year", "name", "value"], rows, provenance)


# ----------------------------------------------------------------- outputs


def write_scheme(path, scheme: IntegrationScheme, provenance=None) -> None:
    rows = [
        (int(v), scheme.years[y], float(z), float(w))
        for v, y, z, w in zip(scheme.vertex, scheme.year, scheme.z, scheme.weight)
    ]
    write_csv(path, ["vertex_id", "year", "z_node", "weight"], rows, provenance)


def write_surface(path, surface, provenance=None) -> None:
    rw = surface.rwpci
    rows = []
    for j, y in enumerate(surface.years):
        for v in range(surface.median.shape[0]):
            rows.append(
                (v, y, surface.median[v, j], surface.q1[v, j], surface.q3[v, j], surface.mean[v, j], surface.sd[v, j], rw[v, j])
            )
    write_csv(path, ["vertex_id", "year", "median", "q1", "q3", "mean", "sd", "rwpci"], rows, provenance)


def write_triangles(path, mesh: TriMesh, provenance=None) -> None:
    rows = [(k, int(a), int(b), int(c)) for k, (a, b, c) in enumerate(mesh.triangles)]
    write_csv(path, ["triangle_id", "v1", "v2", "v3"], rows, provenance)


def write_summary_table(path, model_name: str, marginals, rows_idx=None, provenance=None) -> None:
    """Fixed-effect table: model, parameter, mean, sd, q2.5, q50, q97.5."""
    idx = range(len(marginals.names)) if rows_idx is None else rows_idx
    rows = [
        (model_name, marginals.names[i], marginals.mean[i], marginals.sd[i], *marginals.quantiles[i])
        for i in idx
    ]
    write_csv(path, ["model", "parameter", "mean", "sd", "q2.5", "q50", "q97.5"], rows, provenance)


def write_marginals(path, marginals, provenance=None) -> None:
    rows = [
        (marginals.names[i], marginals.mean[i], marginals.sd[i], *marginals.quantiles[i])
        for i in range(len(marginals.names))
    ]
    write_csv(path, ["component", "mean", "sd", "q2.5", "q50", "q97.5"], rows, provenance)


def write_theta_grid(path, fit, provenance=None) -> None:
    """Grid CSV: the theta coordinates, sigma and rho (if a field), log posterior, weight."""
    spec = fit.spec
    names = list(fit.grid.names)
    header = names + (["sigma", "rho"] if spec.field else []) + (["gamma"] if "theta3" in names else [])
    header += ["log_posterior", "weight"]
    rows = []
    for k, th in enumerate(fit.grid.points):
        r = [float(v) for v in th]
        if spec.field:
            r += [spec.spde_prior.sigma0 * np.exp(th[0]), spec.spde_prior.rho0 * np.exp(th[1])]
        if "theta3" in names:
            r.append(spec.gamma(th))
        r += [fit.grid.log_posterior[k], fit.grid.weights[k]]
        rows.append(r)
    write_csv(path, header, rows, provenance)


def write_decomposition(path, rows, provenance=None) -> None:
    """Table with columns model, V_eta, V_beta, V_xi, C, rho (rho NA when undefined)."""
    out = [(name, r["V_eta"], r["V_beta"], r["V_xi"], r["C"], r["rho"]) for name, r in rows]
    write_csv(path, ["model", "V_eta", "V_beta", "V_xi", "C", "rho"], out, provenance)


def write_detection_curve(path, z, median, lower, upper, provenance=None) -> None:
    rows = list(zip(map(float, z), map(float, median), map(float, lower), map(float, upper)))
    write_csv(path, ["z", "median", "q2.5", "q97.5"], rows, provenance)


# --------------------------------------------------------------- fit artifact


def save_fit(path, fit) -> None:
    """Store grid, modes and posterior precisions in a compressed npz file."""
    arrays = {
        "theta": fit.grid.points,
        "log_posterior": fit.grid.log_posterior,
        "weights": fit.grid.weights,
        "names": np.array(fit.grid.names, dtype=str),
        "provenance": np.array([f"{k}: {v}" for k, v in fit.provenance.items()], dtype=str),
    }
    for k, a in enumerate(fit.approxs):
        if a is None:
            continue
        H = sp.csc_matrix(a.precision)
        arrays[f"mode_{k}"] = a.mode
        arrays[f"H_{k}_data"] = H.data
        arrays[f"H_{k}_indices"] = H.indices
        arrays[f"H_{k}_indptr"] = H.indptr
        arrays[f"diag_{k}"] = np.array([a.log_evidence, a.log_joint, a.n_iter, a.grad_norm])
    np.savez_compressed(path, **arrays)


def load_fit_arrays(path) -> dict:
    """Read :func:`save_fit` output back; precisions are refactorized."""
    with np.load(path) as z:
        d = {k: z[k] for k in z.files}
    out = {
        "theta": d["theta"],
        "log_posterior": d["log_posterior"],
        "weights": d["weights"],
        "names": tuple(d["names"].tolist()),
        "provenance": dict(s.split(": ", 1) for s in d["provenance"].tolist()),
        "approxs": [],
    }
    for k in range(len(d["theta"])):
        if f"mode_{k}" not in d:
            out["approxs"].append(None)
            continue
        n = len(d[f"mode_{k}"])
        H = sp.csc_matrix((d[f"H_{k}_data"], d[f"H_{k}_indices"], d[f"H_{k}_indptr"]), shape=(n, n))
        out["approxs"].append((d[f"mode_{k}"], H, d[f"diag_{k}"]))
    return out
