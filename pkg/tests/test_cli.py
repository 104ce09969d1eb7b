"""End-to-end CLI runs: configs in, reports and figures out, exit codes."""

import json
import os

import numpy as np
import pytest

from effbound.cli import main
from effbound.serialize import dgp_to_dict

from conftest import BATTERY_SEED  # noqa: F401  (shared seed constant)


@pytest.fixture()
def d1_config(tmp_path, d1):
    path = tmp_path / "pop.json"
    path.write_text(json.dumps(dgp_to_dict(d1)))
    return path


def _write(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


def test_bound_task_writes_report_and_figure(tmp_path, d1_config, capsys):
    assert main(["bound", "--config", str(d1_config)]) == 0
    out = capsys.readouterr().out
    report = tmp_path / "pop.bound.json"
    figure = tmp_path / "pop.bound.png"
    assert report.exists() and figure.exists()
    assert f"wrote {report}" in out and f"wrote {figure}" in out
    payload = json.loads(report.read_text())
    assert set(payload["bounds"]) == {"known", "parametric", "unknown"}
    m11 = payload["second_moments"]["parametric"][1][1]
    assert abs(m11 - 2.48) < 1e-12


def test_bound_report_is_byte_identical_on_rerun(tmp_path, d1_config):
    report = tmp_path / "pop.bound.json"
    assert main(["bound", "--config", str(d1_config), "--no-figures"]) == 0
    first = report.read_bytes()
    assert main(["bound", "--config", str(d1_config), "--no-figures"]) == 0
    assert report.read_bytes() == first


def test_bound_csv_format(tmp_path, d1_config):
    assert main(
        ["bound", "--config", str(d1_config), "--format", "csv", "--no-figures"]
    ) == 0
    text = (tmp_path / "pop.bound.csv").read_text()
    assert text.startswith("key,row,col,value")
    assert "bounds.known,0,0," in text


def test_bound_no_figures_and_custom_out(tmp_path, d1_config):
    out = tmp_path / "custom" "-report.json"
    assert main(
        ["bound", "--config", str(d1_config), "--out", str(out), "--no-figures"]
    ) == 0
    assert out.exists()
    assert not (tmp_path / "custom-report.png").exists()
    assert not (tmp_path / "pop.bound.json").exists()


def test_decompose_task_with_refinement(tmp_path, d1, capsys):
    cfg = dgp_to_dict(d1)
    cfg["refinement"] = {"levels": [[1, 2]]}
    path = _write(tmp_path, "pop.json", cfg)
    assert main(["decompose", "--config", str(path)]) == 0
    payload = json.loads((tmp_path / "pop.decompose.json").read_text())
    assert payload["closure_residual"] <= 1e-12
    assert abs(payload["delta1"][1][1] - 0.2496) < 1e-10
    assert len(payload["refinement_traces"]) == 1
    assert abs(payload["refinement_traces"][0]) <= 1e-12
    assert (tmp_path / "pop.decompose.png").exists()


def test_sequence_task_attains(tmp_path, d3, d3_partition, capsys):
    cfg = dgp_to_dict(d3)
    cfg["sequence"] = {
        "kind": "stratified_nested",
        "levels": [
            (d3_partition.assignment(level) + 1).tolist() for level in (1, 2, 3, 4)
        ],
    }
    path = _write(tmp_path, "grid.json", cfg)
    assert main(["sequence", "--config", str(path)]) == 0
    out = capsys.readouterr().out
    assert "limit verdict: attains" in out
    payload = json.loads((tmp_path / "grid.sequence.json").read_text())
    assert payload["classification"]["verdict"] == "attains"
    assert payload["classification"]["final_residual"] <= 1e-10
    assert len(payload["levels"]) == 4
    assert (tmp_path / "grid.sequence.png").exists()


def test_sequence_task_max_depth_gap(tmp_path, d3, d3_partition, capsys):
    cfg = dgp_to_dict(d3)
    cfg["sequence"] = {
        "kind": "stratified_nested",
        "levels": [
            (d3_partition.assignment(level) + 1).tolist() for level in (1, 2, 3, 4)
        ],
    }
    path = _write(tmp_path, "grid.json", cfg)
    assert main(
        ["sequence", "--config", str(path), "--max-depth", "2", "--no-figures"]
    ) == 0
    payload = json.loads((tmp_path / "grid.sequence.json").read_text())
    assert payload["classification"]["verdict"] == "gap"
    assert len(payload["levels"]) == 2


def test_sequence_task_requires_spec(tmp_path, d1_config, capsys):
    assert main(["sequence", "--config", str(d1_config)]) == 1
    assert "sequence" in capsys.readouterr().err


def test_simulate_influence_mode(tmp_path, d1, capsys):
    cfg = dgp_to_dict(d1)
    cfg["simulate"] = {"mode": "influence", "regime": "parametric", "n": 100000}
    path = _write(tmp_path, "pop.json", cfg)
    assert main(["simulate", "--config", str(path)]) == 0
    payload = json.loads((tmp_path / "pop.simulate.json").read_text())
    assert payload["passed"] is True
    assert payload["regime"] == "parametric"
    assert (tmp_path / "pop.simulate.png").exists()


def test_simulate_estimator_mode(tmp_path, d1):
    cfg = dgp_to_dict(d1)
    cfg["simulate"] = {
        "mode": "estimator",
        "n": 1000,
        "reps": 30,
        "contrast": [-1.0, 1.0],
    }
    path = _write(tmp_path, "pop.json", cfg)
    assert main(["simulate", "--config", str(path)]) == 0
    payload = json.loads((tmp_path / "pop.simulate.json").read_text())
    assert payload["contrast"] == [-1.0, 1.0]
    assert payload["contrast_variance"] > 0
    assert set(payload["references"]) == {"known", "parametric", "unknown"}


def test_simulate_estimator_failure_exits_4(tmp_path, d1, capsys):
    cfg = dgp_to_dict(d1)
    cfg["simulate"] = {"mode": "estimator", "n": 4, "reps": 2}
    path = _write(tmp_path, "pop.json", cfg)
    assert main(["simulate", "--config", str(path)]) == 4
    assert "estimation failure" in capsys.readouterr().err


def test_simulate_unknown_mode_exits_1(tmp_path, d1, capsys):
    cfg = dgp_to_dict(d1)
    cfg["simulate"] = {"mode": "jackknife"}
    path = _write(tmp_path, "pop.json", cfg)
    assert main(["simulate", "--config", str(path)]) == 1


def test_validate_pass(tmp_path, d1_config, capsys):
    assert main(["validate", "--config", str(d1_config)]) == 0
    assert "validation PASS" in capsys.readouterr().out
    payload = json.loads((tmp_path / "pop.validate.json").read_text())
    assert payload["overall_pass"] is True
    assert (tmp_path / "pop.validate.png").exists()


def test_validate_thin_overlap_fails(tmp_path, d1, capsys):
    cfg = dgp_to_dict(d1)
    cfg["propensity"] = {
        "kind": "tabular",
        "probs": [[0.9995, 0.0005], [0.4, 0.6]],
    }
    path = _write(tmp_path, "thin.json", cfg)
    assert main(["validate", "--config", str(path)]) == 2
    assert "validation FAIL" in capsys.readouterr().out
    payload = json.loads((tmp_path / "thin.validate.json").read_text())
    assert payload["overall_pass"] is False


def test_validate_p_min_flag(tmp_path, d1_config):
    # an extreme floor makes even a healthy population fail
    assert main(
        ["validate", "--config", str(d1_config), "--p-min", "0.45", "--no-figures"]
    ) == 2


def test_missing_config_file_exits_1(tmp_path, capsys):
    assert main(["bound", "--config", str(tmp_path / "nope.json")]) == 1
    assert "config" in capsys.readouterr().err


def test_malformed_json_exits_1(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert main(["bound", "--config", str(path)]) == 1
    assert "not valid JSON" in capsys.readouterr().err


def test_schema_error_exits_1(tmp_path, d1, capsys):
    cfg = dgp_to_dict(d1)
    del cfg["support"]
    path = _write(tmp_path, "pop.json", cfg)
    assert main(["bound", "--config", str(path)]) == 1
    assert "support" in capsys.readouterr().err


def test_argparse_errors_exit_1(capsys):
    assert main(["bound"]) == 1  # --config required
    assert main(["transmogrify", "--config", "x.json"]) == 1
    assert main([]) == 1
    capsys.readouterr()


def test_thread_cap_flag(tmp_path, d1_config, monkeypatch):
    for name in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        monkeypatch.setenv(name, "sentinel")
    assert main(
        ["bound", "--config", str(d1_config), "--threads", "2", "--no-figures"]
    ) == 0
    assert os.environ["OMP_NUM_THREADS"] == "2"
    assert os.environ["MKL_NUM_THREADS"] == "2"


def test_thread_cap_env(tmp_path, d1_config, monkeypatch):
    monkeypatch.setenv("OMP_NUM_THREADS", "sentinel")
    monkeypatch.setenv("EFFBOUND_THREADS", "3")
    assert main(["bound", "--config", str(d1_config), "--no-figures"]) == 0
    assert os.environ["OMP_NUM_THREADS"] == "3"


def test_quantile_moment_through_cli(tmp_path, d1):
    cfg = dgp_to_dict(d1)
    cfg["moment"] = {"kind": "quantile", "tau": 0.5}
    path = _write(tmp_path, "pop.json", cfg)
    assert main(["bound", "--config", str(path), "--no-figures"]) == 0
    payload = json.loads((tmp_path / "pop.bound.json").read_text())
    assert payload["family"] == {"kind": "quantile", "tau": 0.5}
    assert all(j > 0 for j in payload["jacobians"])


def test_dgp_wrapper_key(tmp_path, d1):
    cfg = {"dgp": dgp_to_dict(d1)}
    path = _write(tmp_path, "wrapped.json", cfg)
    assert main(["bound", "--config", str(path), "--no-figures"]) == 0
    assert (tmp_path / "wrapped.bound.json").exists()
