"""
CLI - end-to-end tests on small runs
"""

import json
import logging

import pytest
from typer.testing import CliRunner

from src import __version__
from src.cli.app import app

runner = CliRunner()


@pytest.fixture(autouse=True)
def restore_root_handlers():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def relaxed_config(small_config):
    """Small config with sigma bands wide enough for the few paths used here."""
    small_config["tolerances"] = {"martingale_sigmas": 5.0, "gradient_sigmas": 5.0,
                                  "gradient_rel": 0.2}
    return small_config


def _invoke(*args):
    return runner.invoke(app, list(args))


def test_simulate_writes_artifacts(write_config, relaxed_config, tmp_path):
    result = _invoke("simulate", "--config", str(write_config(relaxed_config)))
    assert result.exit_code == 0, result.output
    out = tmp_path / "results"
    for name in ("paths.csv", "martingale.csv", "state_bsde.csv", "simulate.json"):
        assert (out / name).is_file()
    record = json.loads((out / "simulate.json").read_text())
    assert record["header"]["command"] == "simulate"
    assert record["header"]["seed"] == 5
    assert record["martingale_passed"] is True


def test_seed_override_reaches_the_artifacts(write_config, relaxed_config, tmp_path):
    result = _invoke("simulate", "--config", str(write_config(relaxed_config)), "--seed", "11",
                     "--paths", "400", "--output-dir", str(tmp_path / "other"))
    assert result.exit_code == 0, result.output
    lines = (tmp_path / "other" / "martingale.csv").read_text().splitlines()
    assert "# seed=11" in lines


def test_grad_check_includes_the_zero_direction(write_config, relaxed_config, tmp_path):
    result = _invoke("grad-check", "--config", str(write_config(relaxed_config)))
    assert result.exit_code == 0, result.output
    rows = json.loads((tmp_path / "results" / "grad_check.json").read_text())["rows"]
    assert len(rows) == 3
    assert rows[0]["adjoint"] == 0.0
    assert rows[0]["finite_difference"] == 0.0
    assert (tmp_path / "results" / "hamiltonian_check.json").is_file()


def test_verify_mp_prints_the_residual(write_config, small_config, tmp_path):
    result = _invoke("verify-mp", "--config", str(write_config(small_config)))
    # the zero policy is not stationary for the default problem
    assert result.exit_code == 1
    assert "necessary_residual=" in result.output
    report = json.loads((tmp_path / "results" / "optimality_report.json").read_text())
    assert report["necessary_residual"] > 1e-3
    assert report["conditional_residual"] >= 0.0


def test_optimize_saves_the_policy(write_config, small_config, tmp_path):
    small_config["optimizer"] = {"max_iters": 2}
    small_config["outputs"]["formats"] = ["csv"]
    result = _invoke("optimize", "--config", str(write_config(small_config)))
    assert result.exit_code in (0, 1)
    out = tmp_path / "results"
    assert (out / "trace.csv").is_file()
    assert (out / "policy.json").is_file()
    assert not (out / "optimality_report.json").exists()
    saved = json.loads((out / "policy.json").read_text())
    assert saved["policy"]["steps"] == 8


def test_lq_bench_subset(write_config, small_config, tmp_path):
    small_config["bench"] = {"criteria": [2, 10]}
    result = _invoke("lq-bench", "--config", str(write_config(small_config)))
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "results" / "lq_bench.json").read_text())
    assert [c["criterion"] for c in report["criteria"]] == [2, 10]
    assert report["passed"] is True


def test_lq_bench_needs_the_lq_problem(write_config, small_config):
    small_config["problem"] = {"builtin": "lq_concave"}
    result = _invoke("lq-bench", "--config", str(write_config(small_config)))
    assert result.exit_code == 2


def test_missing_config_is_a_usage_error(tmp_path):
    result = _invoke("simulate", "--config", str(tmp_path / "absent.json"))
    assert result.exit_code == 2


def test_unknown_key_is_a_usage_error(write_config, small_config):
    small_config["monte_carlo"]["pathz"] = 3
    result = _invoke("simulate", "--config", str(write_config(small_config)))
    assert result.exit_code == 2
    assert "pathz" in result.output


def test_bad_log_format(write_config, small_config):
    result = _invoke("simulate", "--config", str(write_config(small_config)),
                     "--log-format", "xml")
    assert result.exit_code == 2


def test_version():
    result = _invoke("version")
    assert result.exit_code == 0
    assert __version__ in result.output
