import csv
import json
import warnings

import numpy as np
import pytest

from hfcalderon.errors import ConfigError
from hfcalderon.harness import (COMMANDS, PRESETS, Scenario, build_potential, default_workers,
                                dump_scenario, load_potential_grid, load_scenario, parse_scenario,
                                preset, run, save_potential_grid, save_scenario, sha256_file)
from hfcalderon.xray import RayData

MINIMAL = """
[metric]
kind = "euclidean"

[params]
h = [0.1]
sigma = 1.0
"""

SMALL = """
name = "small"
seed = 7

[cone]
n_theta = 4
n_phi = 8

[params]
h = [0.2, 0.1, 0.05]
sigma = 4.0

[potential.v]
kind = "gaussian"
width = 0.3
support_radius = 0.6

[inversion]
grid_n = 12
maxiter = 10
support_radius = 0.8
source = "stationary"
"""


@pytest.fixture
def small():
    return parse_scenario(SMALL)


def _run_quiet(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run(*args, **kw)


# scenario files


def test_minimal_scenario_fills_defaults(tmp_path):
    path = tmp_path / "s.toml"
    path.write_text(MINIMAL)
    s = load_scenario(path)
    assert s.metric.kind == "euclidean"
    assert s.params.h == [0.1] and s.params.sigma == 1.0
    assert s.cone == Scenario().cone
    assert s.inversion == Scenario().inversion
    assert s.potential.v.kind == "gaussian" and s.potential.v_tilde.kind == "zero"


def test_sigma_branch_rule():
    with pytest.raises(ConfigError, match="decaying resolvent branch"):
        parse_scenario('[params]\nsigma = {re = 1.0, im = 0.5}\n')
    s = parse_scenario('[params]\nsigma = {re = 1.0, im = -0.5}\n')
    assert s.params.sigma == 1 - 0.5j


def test_schema_violations_name_the_keys():
    with pytest.raises(ConfigError) as exc:
        parse_scenario('[params]\nh = [0.1, 1.5]\n[metric]\nkind = "sphere"\n')
    msg = str(exc.value)
    assert "params.h" in msg and "metric.kind" in msg
    with pytest.raises(ConfigError, match="cone.n_theta"):
        parse_scenario('[cone]\nn_theta = "many"\n')


def test_round_trip(tmp_path, small):
    path = save_scenario(small, tmp_path / "round.toml")
    again = load_scenario(path)
    assert again == small
    assert dump_scenario(again) == dump_scenario(small)
    complex_sigma = parse_scenario('[params]\nsigma = {re = 2.0, im = -0.25}\n')
    assert parse_scenario(dump_scenario(complex_sigma)) == complex_sigma


def test_unknown_keys_strict_and_lax():
    text = MINIMAL + "\n[cone]\nn_theta = 8\nresolution = 3\n"
    with pytest.raises(ConfigError, match="cone.resolution"):
        parse_scenario(text, strict=True)
    with pytest.warns(UserWarning, match="cone.resolution"):
        s = parse_scenario(text, strict=False)
    assert s.cone.n_theta == 8


def test_parse_error_reports_position():
    with pytest.raises(ConfigError, match=r"line 3, column \d+"):
        parse_scenario('[params]\nh = [0.1]\nsigma = = 2\n')


def test_missing_files_are_reported(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_scenario(tmp_path / "absent.toml")
    with pytest.raises(ConfigError, match="not found"):
        parse_scenario('[potential.v]\nkind = "file"\npath = "missing_grid"\n', base_dir=tmp_path)
    with pytest.raises(ConfigError, match="inversion.data"):
        parse_scenario('[inversion]\ndata = "nothing.csv"\n', base_dir=tmp_path)


def test_presets_are_valid():
    for name in PRESETS:
        assert preset(name).name == name
    with pytest.raises(ConfigError, match="unknown preset"):
        preset("spherical")


def test_potential_grid_file(tmp_path):
    spacing = 0.05
    ax = np.arange(-0.5, 0.5 + 1e-9, spacing)
    X = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1)
    samples = np.exp(-np.sum(X**2, axis=-1) / 0.05)
    save_potential_grid(samples, (-0.5, -0.5, -0.5), spacing, (0, 0, 0), 0.45, tmp_path / "grid")
    V = load_potential_grid(tmp_path / "grid")
    assert V([0.0, 0.0, 0.0])[0] == pytest.approx(1.0, abs=1e-6)
    assert V([0.46, 0.0, 0.0])[0] == 0.0
    s = parse_scenario('[potential.v]\nkind = "file"\npath = "grid"\n', base_dir=tmp_path)
    assert build_potential(s.potential.v, s)([0.1, 0.0, 0.0])[0] == pytest.approx(V([0.1, 0.0, 0.0])[0])


def test_workers_from_environment(monkeypatch):
    monkeypatch.delenv("HFCAL_WORKERS", raising=False)
    assert default_workers() == 1
    monkeypatch.setenv("HFCAL_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("HFCAL_WORKERS", "lots")
    with pytest.raises(ConfigError):
        default_workers()


# runs


def test_sweep_writes_table_and_slope(tmp_path, small):
    res = _run_quiet("sweep", small, tmp_path)
    assert res.status == 0
    rows = list(csv.reader((tmp_path / "convergence.csv").open()))
    assert len(rows) == 4
    assert [float(r[0]) for r in rows[1:]] == [0.2, 0.1, 0.05]
    assert isinstance(res.manifest["summary"]["slope"], float)


def test_manifest_lists_every_artifact(tmp_path, small):
    res = _run_quiet("xray", small, tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m == res.manifest
    for key in ("command", "status", "inputs_digest", "settings", "timings", "files", "scenario"):
        assert key in m
    on_disk = sorted(p.name for p in tmp_path.iterdir() if p.name != "manifest.json")
    assert sorted(f["path"] for f in m["files"]) == on_disk
    for f in m["files"]:
        assert f["sha256"] == sha256_file(tmp_path / f["path"])
    assert m["settings"]["workers"] >= 1
    data = RayData.load_binary(tmp_path / "raydata")
    assert data.values.size == res.manifest["summary"]["n_pairs"]


def test_runs_are_reproducible(tmp_path, small):
    small.inversion.noise = 0.05
    a = _run_quiet("xray", small, tmp_path / "a")
    b = _run_quiet("xray", small, tmp_path / "b")
    assert a.manifest["files"] == b.manifest["files"]
    assert a.manifest["inputs_digest"] == b.manifest["inputs_digest"]
    small.seed = 8
    c = _run_quiet("xray", small, tmp_path / "c")
    assert c.manifest["inputs_digest"] != a.manifest["inputs_digest"]


def test_thread_workers_give_identical_artifacts(tmp_path, small):
    a = _run_quiet("stationary", small, tmp_path / "one", workers=1)
    b = _run_quiet("stationary", small, tmp_path / "two", workers=2)
    assert a.manifest["files"] == b.manifest["files"]
    assert b.manifest["settings"]["workers"] == 2


def test_stage_failure_is_recorded(tmp_path, small):
    small.quadrature.panel_nodes = 3
    res = _run_quiet("born", small, tmp_path)
    assert res.status == 1
    assert res.manifest["status"] == "failed"
    assert res.manifest["failed_stage"] == "kernels"
    assert res.manifest["error"]["type"] == "ResolutionError"


def test_invert_reads_saved_ray_data(tmp_path, small):
    _run_quiet("xray", small, tmp_path / "data")
    small.inversion.data = str(tmp_path / "data" / "raydata.csv")
    small.validate()
    res = _run_quiet("invert", small, tmp_path / "inv")
    assert res.status == 0
    assert (tmp_path / "inv" / "inversion_field.bin").stat().st_size == 12**3 * 16
    assert res.manifest["summary"]["iters"] == 10


def test_each_command_is_dispatched(tmp_path, small):
    small.params.h = [0.2]
    small.dtn.n = 64
    for command in ("forward-kernel", "born", "stationary", "reconstruct", "dtn"):
        res = _run_quiet(command, small, tmp_path / command)
        assert res.status == 0, res.manifest["error"]
        assert len(res.files) > 1
    assert set(COMMANDS) >= {"forward-kernel", "selftest"}
    with pytest.raises(ConfigError):
        run("plot", small, tmp_path / "x")
