"""End-to-end CLI checks: determinism, verification, exit codes."""

import json

import pytest
from click.testing import CliRunner

from bridgekit.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(main, list(args), catch_exceptions=False)


def test_list_enumerates_experiments(runner):
    res = invoke(runner, "list")
    assert res.exit_code == 0
    for name in ("sinkhorn", "gaussian-bridge", "bridge-mixture", "soc-grid",
                 "imf", "discrete-sb"):
        assert name in res.output


def test_run_writes_manifest_and_verifies(runner, tmp_path):
    res = invoke(runner, "run", "sinkhorn", "--out", str(tmp_path), "--seed", "3")
    assert res.exit_code == 0
    out = tmp_path / "sinkhorn"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3
    assert {f["name"] for f in manifest["files"]} == {"coupling.csv",
                                                      "report.json",
                                                      "trace.csv"}
    for f in manifest["files"]:
        assert (out / f["name"]).exists()
    ver = invoke(runner, "verify", str(out))
    assert ver.exit_code == 0
    assert "PASS" in ver.output


def test_runs_are_byte_stable(runner, tmp_path):
    hashes = []
    for sub in ("a", "b"):
        invoke(runner, "run", "bridge-mixture", "--out", str(tmp_path / sub),
               "--seed", "11", "--set", "n_samples=2000")
        manifest = json.loads(
            (tmp_path / sub / "bridge-mixture" / "manifest.json").read_text())
        hashes.append({f["name"]: f["sha256"] for f in manifest["files"]})
    assert hashes[0] == hashes[1]


def test_different_seed_changes_outputs(runner, tmp_path):
    hashes = []
    for seed in ("1", "2"):
        invoke(runner, "run", "bridge-mixture", "--out", str(tmp_path / seed),
               "--seed", seed, "--set", "n_samples=2000")
        manifest = json.loads(
            (tmp_path / seed / "bridge-mixture" / "manifest.json").read_text())
        hashes.append({f["name"]: f["sha256"] for f in manifest["files"]})
    assert hashes[0] != hashes[1]


def test_verify_catches_corruption(runner, tmp_path):
    invoke(runner, "run", "sinkhorn", "--out", str(tmp_path))
    out = tmp_path / "sinkhorn"
    target = out / "coupling.csv"
    data = bytearray(target.read_bytes())
    data[0] ^= 0xFF
    target.write_bytes(bytes(data))
    res = runner.invoke(main, ["verify", str(out)])
    assert res.exit_code == 1
    assert "hash mismatch" in res.output


def test_verify_catches_missing_file(runner, tmp_path):
    invoke(runner, "run", "sinkhorn", "--out", str(tmp_path))
    out = tmp_path / "sinkhorn"
    (out / "trace.csv").unlink()
    res = runner.invoke(main, ["verify", str(out)])
    assert res.exit_code == 1
    assert "missing" in res.output


def test_unknown_experiment_is_usage_error(runner, tmp_path):
    res = runner.invoke(main, ["run", "nope", "--out", str(tmp_path)])
    assert res.exit_code == 2
    assert "unknown experiment" in res.output


def test_unknown_parameter_is_usage_error(runner, tmp_path):
    res = runner.invoke(main, ["run", "sinkhorn", "--out", str(tmp_path),
                               "--set", "bogus=1"])
    assert res.exit_code == 2
    assert "unknown parameter" in res.output


def test_numerical_fault_exits_one_and_cleans_up(runner, tmp_path):
    res = runner.invoke(main, ["run", "sinkhorn", "--out", str(tmp_path),
                               "--set", "epsilon=-1.0"])
    assert res.exit_code == 1
    assert "numerical fault" in res.output
    assert list((tmp_path / "sinkhorn").iterdir()) == []


def test_config_file_and_override_precedence(runner, tmp_path):
    cfg = tmp_path / "config.toml"
    cfg.write_text("[sinkhorn]\nepsilon = 0.7\nmax_iters = 500\n")
    invoke(runner, "run", "sinkhorn", "--config", str(cfg),
           "--out", str(tmp_path / "r1"))
    m1 = json.loads((tmp_path / "r1" / "sinkhorn" / "manifest.json").read_text())
    assert m1["config"]["epsilon"] == 0.7 and m1["config"]["max_iters"] == 500
    # --set wins over the config file
    invoke(runner, "run", "sinkhorn", "--config", str(cfg),
           "--out", str(tmp_path / "r2"), "--set", "epsilon=0.3")
    m2 = json.loads((tmp_path / "r2" / "sinkhorn" / "manifest.json").read_text())
    assert m2["config"]["epsilon"] == 0.3


def test_soc_grid_experiment_runs(runner, tmp_path):
    res = invoke(runner, "run", "soc-grid", "--out", str(tmp_path),
                 "--set", "n_t=41", "--set", "n_x=41")
    assert res.exit_code == 0
    rmse_rows = (tmp_path / "soc-grid" / "control_rmse.csv").read_text()
    assert rmse_rows.splitlines()[0] == "t,rmse"
    worst = max(float(r.split(",")[1]) for r in rmse_rows.splitlines()[1:])
    assert worst < 0.05
