import json
import subprocess
import sys

import pytest

from hfcalderon.cli import main

from .test_harness import SMALL


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


def test_unknown_subcommand_is_a_usage_error(capsys):
    assert main(["plot"]) == 2
    assert "invalid choice" in capsys.readouterr().err


def test_bad_arguments_are_usage_errors(tmp_path, scenario_file, capsys):
    assert main(["xray", "--workers", "0"]) == 2
    assert main(["xray", "--h", "a,b"]) == 2
    assert main(["xray", "--scenario", str(tmp_path / "missing.toml")]) == 2
    assert main(["xray", "--scenario", str(scenario_file), "--h", "0.1,2.0"]) == 2
    assert "outside (0, 1]" in capsys.readouterr().err


def test_unknown_keys_need_strict_to_fail(tmp_path, capsys):
    path = tmp_path / "extra.toml"
    path.write_text(SMALL + "\n[output]\nformat = \"png\"\n")
    assert main(["xray", "--scenario", str(path), "--strict", "--out", str(tmp_path / "a")]) == 2
    with pytest.warns(UserWarning, match="output.format"):
        assert main(["xray", "--scenario", str(path), "--out", str(tmp_path / "b")]) == 0


def test_successful_run_prints_summary(tmp_path, scenario_file, capsys):
    out = tmp_path / "run"
    assert main(["stationary", "--scenario", str(scenario_file), "--out", str(out), "--h", "0.1,0.05"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["status"] == "ok"
    assert (out / "stationary_h0p1_value.bin").exists()
    assert (out / "stationary_h0p05_dnu.bin").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["scenario"]["params"]["h"] == [0.1, 0.05]


def test_stage_failure_exit_status(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text(SMALL + "\n[quadrature]\npanel_nodes = 3\n")
    assert main(["born", "--scenario", str(path), "--out", str(tmp_path / "o")]) == 1
    assert "'kernels' failed" in capsys.readouterr().err
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["failed_stage"] == "kernels"


def test_selftest_subset_on_the_flat_preset(tmp_path, capsys):
    assert main(["selftest", "--only", "1,8", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "selftest.json").read_text())
    assert [r["criterion"] for r in report] == ["AC1", "AC8"]
    assert all(r["passed"] for r in report)


def test_entry_point_module(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hfcalderon.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("forward-kernel", "sweep", "selftest"):
        assert name in proc.stdout
