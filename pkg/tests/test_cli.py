import csv
import json
import re

import pytest

from pdmpstop.cli import main
from pdmpstop.reporting import TABLE_CSV_HEADER

SMALL = {
    "N": 3,
    "quantization": {"points_per_stage": 5, "train_samples": 3000, "weight_samples": 3000, "eval_samples": 3000},
    "stopping": {"n_mc": 3000},
    "seed": 7,
}


def _config(tmp_path, extra=None, name="config.json"):
    doc = json.loads(json.dumps(SMALL))
    for key, value in (extra or {}).items():
        if isinstance(value, dict):
            doc.setdefault(key, {}).update(value)
        else:
            doc[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def _header(path):
    with open(path, encoding="utf-8") as fh:
        return next(csv.reader(fh))


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    out = tmp / "out"
    assert main(["pipeline", "--config", _config(tmp), "--out", str(out), "--dump"]) == 0
    return out


def test_pipeline_outputs(pipeline_dir):
    files = {p.name for p in pipeline_dir.iterdir()}
    assert {"grids.json", "values.json", "evaluation.csv", "outcomes.csv", "bounds.json",
            "oracle.csv", "oracle_v0.csv", "oracle_v3.csv", "table.csv", "manifest.json"} <= files
    assert _header(pipeline_dir / "evaluation.csv") == ["n_mc", "V_bar_0", "stderr", "E_sup", "B1", "beta", "feasible"]
    assert _header(pipeline_dir / "outcomes.csv") == ["traj_id", "stop_stage", "tau", "reward", "reason"]
    assert _header(pipeline_dir / "table.csv") == TABLE_CSV_HEADER
    assert _header(pipeline_dir / "oracle.csv") == ["N", "x0", "V0_oracle"]
    assert _header(pipeline_dir / "oracle_v2.csv") == ["x", "v_2(x)"]
    man = json.loads((pipeline_dir / "manifest.json").read_text())
    assert man["status"] == "ok" and man["failed_phase"] is None
    assert [p["name"] for p in man["phases"]] == ["train", "weights", "errors", "solve", "evaluate", "bounds", "oracle", "table"]
    assert man["config"]["seed"] == 7 and man["config"]["N"] == 3
    values = json.loads((pipeline_dir / "values.json").read_text())
    assert values["schema_version"] == 1 and len(values["stages"]) == 4


def test_bounds_subcommand_reproduces_pipeline(pipeline_dir, tmp_path):
    out = tmp_path / "b"
    rc = main(["bounds", "--config", _config(tmp_path), "--out", str(out),
               "--grids", str(pipeline_dir / "grids.json"), "--values", str(pipeline_dir / "values.json")])
    assert rc == 0
    assert (out / "bounds.json").read_text() == (pipeline_dir / "bounds.json").read_text()


def test_solve_and_evaluate_from_files(pipeline_dir, tmp_path):
    out = tmp_path / "s"
    cfg = _config(tmp_path)
    assert main(["solve", "--config", cfg, "--out", str(out), "--grids", str(pipeline_dir / "grids.json")]) == 0
    assert (out / "values.json").read_text() == (pipeline_dir / "values.json").read_text()
    assert main(["evaluate", "--config", cfg, "--out", str(out), "--grids", str(pipeline_dir / "grids.json")]) == 0
    assert (out / "evaluation.csv").read_text() == (pipeline_dir / "evaluation.csv").read_text()


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = _config(tmp_path, {"quantization": {"points": 3}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "points" in capsys.readouterr().err


def test_missing_grid_file_exits_4(tmp_path, capsys):
    rc = main(["solve", "--config", _config(tmp_path), "--out", str(tmp_path / "o"), "--grids", str(tmp_path / "nope.json")])
    assert rc == 4 and "nope.json" in capsys.readouterr().err
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["status"] == "failed" and man["failed_phase"] == "load"


def test_tampered_grid_file_exits_4(pipeline_dir, tmp_path, capsys):
    doc = json.loads((pipeline_dir / "grids.json").read_text())
    row = doc["stages"][2]["transitions"][0]
    row["probs"][0] += 0.25
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    rc = main(["solve", "--config", _config(tmp_path), "--out", str(tmp_path / "o"), "--grids", str(bad)])
    assert rc == 4
    assert re.search(r"stage 2 transition row z_class=\d+", capsys.readouterr().err)


def test_schema_version_exits_4(pipeline_dir, tmp_path):
    doc = json.loads((pipeline_dir / "grids.json").read_text())
    doc["schema_version"] = 42
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["solve", "--config", _config(tmp_path), "--out", str(tmp_path / "o"), "--grids", str(bad)]) == 4


def test_require_feasible_exits_3(pipeline_dir, tmp_path):
    cfg = _config(tmp_path, {"stopping": {"beta_override": 0.4}})
    rc = main(["evaluate", "--config", cfg, "--out", str(tmp_path / "o"), "--require-feasible",
               "--grids", str(pipeline_dir / "grids.json"), "--values", str(pipeline_dir / "values.json")])
    assert rc == 3
    with open(tmp_path / "o" / "evaluation.csv", encoding="utf-8") as fh:
        assert next(csv.DictReader(fh))["feasible"] == "0"


def test_simulate_zero_trajectories(tmp_path):
    out = tmp_path / "z"
    assert main(["simulate", "--config", _config(tmp_path), "--out", str(out), "--n-trajectories", "0"]) == 0
    lines = (out / "trajectories.csv").read_text().splitlines()
    assert lines == ["traj_id,k,Z,S,T,boundary_forced"]
    assert (out / "trajectories.svg").read_text().lstrip().startswith("<?xml")


def test_simulate_svg_is_deterministic(tmp_path):
    cfg = _config(tmp_path)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a"), "--n-trajectories", "2"]) == 0
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--n-trajectories", "2", "--threads", "3"]) == 0
    svg = (tmp_path / "a" / "trajectories.svg").read_text()
    assert svg == (tmp_path / "b" / "trajectories.svg").read_text()
    assert len(re.findall(r'id="trajectory-\d+"', svg)) == 2
    rows = (tmp_path / "a" / "trajectories.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 4


def test_failure_recorded_in_manifest(tmp_path, capsys):
    cfg = _config(tmp_path, {"model": {"name": "user-plugin", "plugin": "_models:broken_model"}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "f")]) == 3
    man = json.loads((tmp_path / "f" / "manifest.json").read_text())
    assert man["status"] == "failed" and man["failed_phase"] == "train"
    assert "kernel sampler failed" in man["error"]


def test_plugin_with_params(tmp_path):
    cfg = _config(tmp_path, {"model": {"name": "user-plugin", "plugin": "_models:example_plugin", "params": {"rate_beta": 2.0}}})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "p"), "--n-trajectories", "1"]) == 0


def test_plugin_requires_plugin_name(tmp_path):
    cfg = _config(tmp_path, {"model": {"plugin": "_models:example_plugin"}})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "p")]) == 2


def test_threads_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PDMPSTOP_THREADS", "2")
    cfg = _config(tmp_path)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "t"), "--n-trajectories", "1"]) == 0
    monkeypatch.setenv("PDMPSTOP_THREADS", "many")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "u"), "--n-trajectories", "1"]) == 2


def test_report_merges_runs(pipeline_dir, tmp_path):
    other = tmp_path / "run2"
    cfg = _config(tmp_path, {"quantization": {"points_per_stage": 3}, "bounds": {"oracle": False}})
    assert main(["pipeline", "--config", cfg, "--out", str(other)]) == 0
    out = tmp_path / "rep"
    assert main(["report", "--config", cfg, "--out", str(out), str(pipeline_dir), str(other)]) == 0
    with open(out / "report.csv", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["Pt"] for r in rows] == ["3", "5"]
    assert "oracle V0" in (out / "report.svg").read_text()
