import numpy as np
import pytest

from conftest import grid_mesh
from dslgcp import __version__
from dslgcp.integration import Transect
from dslgcp.io import (
    config_hash,
    make_provenance,
    read_covariates,
    read_csv,
    read_detections,
    read_transects,
    write_covariates,
    write_csv,
    write_detections,
    write_transects,
)
from dslgcp.model import CovariateField, DataError, Detections


def test_provenance_header(tmp_path):
    prov = make_provenance("a = 1\n", seed=7, command="fit")
    assert prov["dslgcp_version"] == __version__
    assert prov["config_sha256"] == config_hash("a = 1\n") and len(prov["config_sha256"]) == 64
    p = tmp_path / "x.csv"
    write_csv(p, ["a", "b"], [(1, 0.1), (2, None)], prov)
    lines = p.read_text().splitlines()
    assert lines[:4] == [f"# dslgcp_version: {__version__}", f"# config_sha256: {prov['config_sha256']}", "# seed: 7", "# command: fit"]
    rows, got = read_csv(p)
    assert got == {k: str(v) for k, v in prov.items()}
    assert rows == [{"a": "1", "b": "0.10000000000000001"}, {"a": "2", "b": "NA"}]


def test_transects_round_trip(tmp_path, rng):
    trs = [Transect(f"t{i}", rng.uniform(0, 1, (3, 2)), 2000 + i, 0.5) for i in range(3)]
    p = tmp_path / "t.csv"
    write_transects(p, trs)
    back = read_transects(p, 0.5)
    for a, b in zip(trs, back):
        assert a.id == b.id and a.year == b.year and b.half_width == 0.5
        np.testing.assert_array_equal(a.waypoints, b.waypoints)


def test_transect_waypoint_order_and_year_check(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("transect_id,waypoint_order,x,y,year\na,1,1,0,2001\na,0,0,0,2001\n")
    np.testing.assert_array_equal(read_transects(p, 1.0)[0].waypoints, [(0, 0), (1, 0)])
    p.write_text("transect_id,waypoint_order,x,y,year\na,0,0,0,2001\na,1,1,0,2002\n")
    with pytest.raises(DataError, match="several years"):
        read_transects(p, 1.0)
    p.write_text("transect_id,x,y,year\na,0,0,2001\n")
    with pytest.raises(DataError, match="waypoint_order"):
        read_transects(p, 1.0)


def test_detections_round_trip(tmp_path, rng):
    d = Detections(["a", "b"], rng.uniform(size=(2, 2)), [2001, 2002], ["t0", "t1"], [0.1, 0.25])
    p = tmp_path / "d.csv"
    write_detections(p, d)
    back = read_detections(p)
    assert list(back.id) == ["a", "b"] and list(back.transect_id) == ["t0", "t1"]
    np.testing.assert_array_equal(back.xy, d.xy)
    np.testing.assert_array_equal(back.z, d.z)
    p.write_text("id,x,y,year,transect_id,perp_distance_km\n")
    assert len(read_detections(p)) == 0


def test_covariates_round_trip(tmp_path, rng):
    mesh = grid_mesh(3)
    f = CovariateField("sst", rng.normal(size=(mesh.n_vertices, 2)), (2001, 2002))
    p = tmp_path / "c.csv"
    write_covariates(p, [f])
    back = read_covariates(p, mesh)["sst"]
    np.testing.assert_array_equal(back.values, f.values)
    assert back.years == (2001, 2002)


def test_covariates_by_coordinates(tmp_path):
    mesh = grid_mesh(2)
    lines = ["x,y,year,name,value"] + [f"{x},{y},1,c,{x + 10 * y}" for x, y in mesh.vertices + 0.01]
    p = tmp_path / "c.csv"
    p.write_text("\n".join(lines) + "\n")
    got = read_covariates(p, mesh)["c"].values[:, 0]
    np.testing.assert_allclose(got, mesh.vertices[:, 0] + 10 * mesh.vertices[:, 1] + 0.11)


def test_covariate_gaps_are_data_errors(tmp_path):
    mesh = grid_mesh(2)
    p = tmp_path / "c.csv"
    p.write_text("vertex_id,year,name,value\n0,1,c,1.0\n")
    with pytest.raises(DataError, match="no value for vertex 1"):
        read_covariates(p, mesh)
    p.write_text("vertex_id,year,name,value\n99,1,c,1.0\n")
    with pytest.raises(DataError, match="out of range"):
        read_covariates(p, mesh)
