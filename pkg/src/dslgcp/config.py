"""Run configuration read from an INI file.

Relative paths are resolved against the directory holding the config
file. Input files default to the output directory so that the stages
``mesh -> simulate -> fit -> predict`` chain without extra settings.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from dataclasses import field as dc_field
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_polygon", "CENTERING_SCHEMES"]

CENTERING_SCHEMES = ("none", "within-year", "space-time")


class ConfigError(ValueError):
    """Missing or invalid configuration."""


def parse_polygon(text: str):
    """``"x1 y1, x2 y2, ..."`` to a list of ``(x, y)`` pairs."""
    pts = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split()
        if len(parts) != 2:
            raise ConfigError(f"bad polygon vertex {item!r}; expected 'x y'")
        try:
            pts.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise ConfigError(f"bad polygon vertex {item!r}") from exc
    if len(pts) < 3:
        raise ConfigError("a polygon needs at least three vertices")
    return pts


def _list(text: str) -> tuple:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _years(text: str) -> tuple:
    out = []
    for s in _list(text):
        try:
            out.append(int(s))
        except ValueError:
            out.append(s)
    return tuple(out)


@dataclass
class RunConfig:
    config_path: Path
    config_text: str
    output: Path
    # paths
    mesh_path: Path | None = None
    transects_path: Path | None = None
    detections_path: Path | None = None
    covariates_path: Path | None = None
    # mesh
    boundary: list | None = None
    max_edge: float | None = None
    inner_region: list | None = None
    inner_max_edge: float | None = None
    min_angle: float = 21.0
    # survey
    half_width: float = 1.0
    R: int | None = None  # None: 5 for half-normal, 4 p + 1 for the spline
    subdivide: bool = False
    region: list | None = None
    recompute_distances: bool = True
    # model
    model_name: str = "model"
    fixed_effects: tuple = ()
    intercept: bool = True
    field: bool = True
    centering: str = "none"
    centered_covariate: str | None = None
    detection: str = "half_normal"
    spline_p: int = 5
    detection_site: str = "midline"
    beta_prec: float = 1e-3
    prior_sigma0: float = 1.0
    prior_rho0: float | None = None
    var_log_sigma: float = 10.0
    var_log_rho: float = 1.0
    var_log_gamma: float = 10.0
    # grid
    n_points: int = 7
    n_gamma: int = 13
    grid_width: float = 3.0
    # simulate
    sim_beta: dict = dc_field(default_factory=dict)
    sim_field: tuple | None = None
    sim_sigma_g: float | None = None
    sim_years: tuple = ()
    sim_lines_per_year: int = 4
    sim_synthetic_covariate: str | None = None
    # predict
    n_samples: int = 2000
    rwpci_ceiling: float = 100.0
    abundance_region: list | None = None
    # run
    seed: int = 0
    workers: int = 1

    @property
    def default_mesh_path(self) -> Path:
        return self.mesh_path or self.output / "mesh.txt"

    @property
    def default_transects_path(self) -> Path:
        return self.transects_path or self.output / "transects.csv"

    @property
    def default_detections_path(self) -> Path:
        return self.detections_path or self.output / "detections.csv"

    @property
    def default_covariates_path(self) -> Path:
        return self.covariates_path or self.output / "covariates.csv"

    def resolved_text(self) -> str:
        """All settings including defaults, one ``key = value`` per line."""
        lines = []
        for f in fields(self):
            if f.name in ("config_text",):
                continue
            lines.append(f"{f.name} = {getattr(self, f.name)!r}")
        return "\n".join(lines) + "\n"


def load_config(path, output=None, seed=None, workers=None) -> RunConfig:
    """Parse and validate a run configuration; command-line overrides win."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    text = path.read_text()
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    base = path.parent

    def get(section, key, conv=str, default=None):
        if not cp.has_option(section, key):
            return default
        raw = cp.get(section, key).strip()
        if raw == "":
            return default
        try:
            if conv is bool:
                return cp.getboolean(section, key)
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc

    def p(section, key):
        v = get(section, key)
        return None if v is None else (base / v).resolve()

    out = Path(output).resolve() if output else (p("paths", "output") or (base / "output").resolve())
    cfg = RunConfig(config_path=path.resolve(), config_text=text, output=out)
    cfg.mesh_path = p("paths", "mesh")
    cfg.transects_path = p("paths", "transects")
    cfg.detections_path = p("paths", "detections")
    cfg.covariates_path = p("paths", "covariates")

    b = get("mesh", "boundary")
    cfg.boundary = parse_polygon(b) if b else None
    cfg.max_edge = get("mesh", "max_edge", float)
    ir = get("mesh", "inner_region")
    cfg.inner_region = parse_polygon(ir) if ir else None
    cfg.inner_max_edge = get("mesh", "inner_max_edge", float)
    cfg.min_angle = get("mesh", "min_angle", float, 21.0)

    cfg.half_width = get("survey", "half_width", float, 1.0)
    cfg.R = get("survey", "R", int)
    cfg.subdivide = get("survey", "subdivide", bool, False)
    r = get("survey", "region")
    cfg.region = parse_polygon(r) if r else None
    cfg.recompute_distances = get("survey", "recompute_distances", bool, True)

    cfg.model_name = get("model", "name", str, "model")
    cfg.fixed_effects = _list(get("model", "fixed_effects", str, ""))
    cfg.intercept = get("model", "intercept", bool, True)
    cfg.field = get("model", "field", bool, True)
    cfg.centering = get("model", "centering", str, "none")
    cfg.centered_covariate = get("model", "centered_covariate")
    cfg.detection = get("model", "detection", str, "half_normal")
    cfg.spline_p = get("model", "spline_p", int, 5)
    cfg.detection_site = get("model", "detection_site", str, "midline")
    cfg.beta_prec = get("model", "beta_prec", float, 1e-3)
    cfg.prior_sigma0 = get("model", "prior_sigma0", float, 1.0)
    cfg.prior_rho0 = get("model", "prior_rho0", float)
    cfg.var_log_sigma = get("model", "var_log_sigma", float, 10.0)
    cfg.var_log_rho = get("model", "var_log_rho", float, 1.0)
    cfg.var_log_gamma = get("model", "var_log_gamma", float, 10.0)

    cfg.n_points = get("grid", "n_points", int, 7)
    cfg.n_gamma = get("grid", "n_gamma", int, 13)
    cfg.grid_width = get("grid", "width", float, 3.0)

    if cp.has_section("simulate"):
        for key, raw in cp.items("simulate"):
            if key.startswith("beta."):
                try:
                    cfg.sim_beta[key[5:]] = float(raw)
                except ValueError as exc:
                    raise ConfigError(f"[simulate] {key} = {raw!r} is not a number") from exc
        fs, fr = get("simulate", "field_sigma", float), get("simulate", "field_rho", float)
        cfg.sim_field = (fs, fr) if fs is not None and fr is not None else None
        cfg.sim_sigma_g = get("simulate", "sigma_g", float)
        cfg.sim_years = _years(get("simulate", "years", str, ""))
        cfg.sim_lines_per_year = get("simulate", "lines_per_year", int, 4)
        cfg.sim_synthetic_covariate = get("simulate", "synthetic_covariate")

    cfg.n_samples = get("predict", "n_samples", int, 2000)
    cfg.rwpci_ceiling = get("predict", "rwpci_ceiling", float, 100.0)
    ar = get("predict", "abundance_region")
    cfg.abundance_region = parse_polygon(ar) if ar else None

    cfg.seed = get("run", "seed", int, 0)
    cfg.workers = get("run", "workers", int, 1)
    if seed is not None:
        cfg.seed = int(seed)
    if workers is not None:
        cfg.workers = int(workers)
    if cfg.R is None:
        cfg.R = 5 if cfg.detection != "spline" else 4 * cfg.spline_p + 1
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.centering not in CENTERING_SCHEMES:
        raise ConfigError(f"centering must be one of {CENTERING_SCHEMES}, got {cfg.centering!r}")
    if cfg.centering != "none" and not cfg.centered_covariate:
        raise ConfigError("centering requires [model] centered_covariate")
    if cfg.detection not in ("half_normal", "spline"):
        raise ConfigError(f"detection must be half_normal or spline, got {cfg.detection!r}")
    if cfg.detection_site not in ("midline", "observed"):
        raise ConfigError("detection_site must be midline or observed")
    if not cfg.half_width > 0:
        raise ConfigError("half_width must be positive")
    if cfg.R < 2:
        raise ConfigError("R must be at least 2")
    if cfg.workers < 1:
        raise ConfigError("workers must be at least 1")
    for name in ("n_points", "n_gamma"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be at least 1")
    if cfg.n_samples < 100:
        raise ConfigError("n_samples must be at least 100")
    if cfg.max_edge is not None and not cfg.max_edge > 0:
        raise ConfigError("max_edge must be positive")
