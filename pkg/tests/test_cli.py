import csv
import json
from pathlib import Path

import pytest

from mfdlab.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, main, verify_manifest
from mfdlab.scenarios import scenario_1a, scenario_1b, scenario_1c, with_overrides

ARTIFACTS = {"trajectory.csv", "metrics.json", "checkpoint.json", "manifest.json"}


def write_config(path: Path, config, **extra) -> Path:
    d = config.to_dict()
    d.update(extra)
    path.write_text(json.dumps(d))
    return path


@pytest.fixture
def cfg_1a(tmp_path):
    return write_config(tmp_path / "1a.json", with_overrides(scenario_1a(15.0), horizon_s=900.0))


def only_dir(root: Path) -> Path:
    dirs = [p for p in root.iterdir() if p.is_dir()]
    assert len(dirs) == 1
    return dirs[0]


def test_run_writes_four_artifacts(cfg_1a, tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(cfg_1a), "--out", str(out)]) == EXIT_OK
    run = only_dir(out)
    assert ARTIFACTS <= {p.name for p in run.iterdir()}
    header = (run / "trajectory.csv").read_text().splitlines()[0]
    assert header == "t_s,n_11,n_12,n_21,n_22,u_12,u_21,td_error,rank_ok,event"
    assert verify_manifest(run)
    man = json.loads((run / "manifest.json").read_text())
    assert man["seed"] == 0 and "numpy" in man["versions"]


def test_run_plot_option(cfg_1a, tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(cfg_1a), "--out", str(out), "--controller", "static", "--plot"]) == 0
    names = {p.name for p in only_dir(out).iterdir()}
    assert {"regional.png", "controls.png"} <= names


def test_malformed_config_exit_1_no_artifacts(tmp_path):
    out = tmp_path / "out"
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", str(bad), "--out", str(out)]) == EXIT_CONFIG
    unknown = write_config(tmp_path / "u.json", scenario_1a(), extra_gain=3)
    assert main(["run", str(unknown), "--out", str(out)]) == EXIT_CONFIG
    invalid = tmp_path / "i.json"
    d = scenario_1a().to_dict()
    d["horizon_s"] = -1
    invalid.write_text(json.dumps(d))
    assert main(["run", str(invalid), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()


def test_divergence_exit_2(tmp_path):
    cfg = write_config(tmp_path / "d.json",
                       with_overrides(scenario_1a(15.0), horizon_s=900.0, beta=1e300))
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--out", str(out)]) == EXIT_DIVERGED
    assert ARTIFACTS <= {p.name for p in only_dir(out).iterdir()}


def test_rerun_is_byte_identical(cfg_1a, tmp_path):
    main(["run", str(cfg_1a), "--out", str(tmp_path / "a")])
    main(["run", str(cfg_1a), "--out", str(tmp_path / "b")])
    a = (only_dir(tmp_path / "a") / "trajectory.csv").read_bytes()
    b = (only_dir(tmp_path / "b") / "trajectory.csv").read_bytes()
    assert a == b


def test_output_dir_from_environment(cfg_1a, tmp_path, monkeypatch):
    monkeypatch.setenv("MFDLAB_OUT", str(tmp_path / "env"))
    assert main(["run", str(cfg_1a), "--controller", "static"]) == EXIT_OK
    assert only_dir(tmp_path / "env").name == "1A_static_seed0"


def test_output_dir_from_config(tmp_path):
    cfg = write_config(tmp_path / "c.json", with_overrides(scenario_1a(15.0), horizon_s=300.0),
                       output_dir=str(tmp_path / "cfgout"))
    assert main(["run", str(cfg), "--controller", "static"]) == EXIT_OK
    assert (tmp_path / "cfgout").is_dir()


def test_sweep_six_values(tmp_path):
    cfg = write_config(tmp_path / "1b.json", with_overrides(scenario_1b(15.0), horizon_s=1800.0))
    out = tmp_path / "out"
    assert main(["sweep", str(cfg), "--values", "15,20,30,45,60,90", "--out", str(out)]) == 0
    root = out / "sweep_1B_dt_reinforce"
    rows = list(csv.DictReader((root / "summary.csv").open()))
    assert [float(r["value"]) for r in rows] == [15, 20, 30, 45, 60, 90]
    assert [float(r["beta"]) for r in rows] == [0.01, 0.007, 0.005, 0.003, 1e-4, 7e-5]
    assert all("settling_r1_s" in r for r in rows)
    summary = json.loads((root / "summary.json").read_text())
    assert isinstance(summary["settling_nondecreasing"], bool)
    assert (root / "settling.png").exists()
    for v in (15, 90):
        run = root / f"1B_irl_seed0_dt_reinforce{v}"
        man = json.loads((run / "manifest.json").read_text())
        assert man["config"]["dt_control"] == v


def test_single_value_sweep_matches_run(tmp_path):
    cfg = write_config(tmp_path / "1b.json", with_overrides(scenario_1b(30.0), horizon_s=900.0))
    main(["sweep", str(cfg), "--values", "30", "--out", str(tmp_path / "s")])
    main(["run", str(cfg), "--out", str(tmp_path / "r")])
    a = (tmp_path / "s/sweep_1B_dt_reinforce/1B_irl_seed0_dt_reinforce30/trajectory.csv")
    b = only_dir(tmp_path / "r") / "trajectory.csv"
    assert a.read_bytes() == b.read_bytes()


def test_sweep_records_failed_value(tmp_path):
    cfg = write_config(tmp_path / "1b.json", with_overrides(scenario_1b(15.0), horizon_s=300.0))
    assert main(["sweep", str(cfg), "--values", "15,25", "--out", str(tmp_path)]) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "sweep_1B_dt_reinforce" / "summary.csv").open()))
    assert rows[0]["status"] == "ok"
    assert rows[1]["status"].startswith("error: no learning rate")


def test_compare_table(tmp_path):
    cfg = write_config(tmp_path / "1c.json",
                       with_overrides(scenario_1c(), horizon_s=1200.0, mpc_horizon=5))
    out = tmp_path / "out"
    assert main(["compare", str(cfg), "--controllers", "irl,mpc", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "compare" / "metrics.csv").open()))
    assert [r["controller"] for r in rows] == ["irl", "mpc"]
    assert {"settling_r1_s", "settling_r2_s", "cpu_per_step_s", "tts_veh_s"} <= set(rows[0])
    assert (out / "compare" / "1C_1c_regional.png").exists()


def test_compare_empty_controller_list(cfg_1a, tmp_path):
    assert main(["compare", str(cfg_1a), "--controllers", "", "--out", str(tmp_path)]) == 1
    assert main(["compare", str(cfg_1a), "--controllers", "irl,foo", "--out", str(tmp_path)]) == 1


def test_init_presets(tmp_path, capsys):
    assert main(["init", "1B", "--dt", "45", "-o", str(tmp_path / "p.json")]) == 0
    d = json.loads((tmp_path / "p.json").read_text())
    assert d["id"] == "1B" and d["dt_reinforce"] == 45.0
    assert main(["init", "2", "--case", "abrupt"]) == 0
    assert json.loads(capsys.readouterr().out)["demand"]["kind"] == "trapezoid+abrupt"
    assert main(["init", "9"]) == EXIT_CONFIG


def test_usage_error_exit_code():
    assert main(["run"]) == EXIT_CONFIG
