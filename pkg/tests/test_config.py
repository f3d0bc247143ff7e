"""
Experiment config - unit tests
"""

import json

import pytest

from src.core.forward import ControlPolicy
from src.data.exceptions import ConfigError
from src.schemas.config import ExperimentConfig, parse_config, validate_config

# ============================================================================
# VALIDATION
# ============================================================================


def test_defaults():
    config = validate_config({"problem": {"builtin": "lq"}})
    assert config.grid.N == 100
    assert config.monte_carlo.paths == 100_000
    assert config.monte_carlo.seed == 42
    assert config.tolerances.necessary_residual == 1e-3
    assert config.outputs.formats == ["csv", "json"]


def test_misspelled_key_is_located():
    with pytest.raises(ConfigError) as exc_info:
        validate_config({"problem": {"builtin": "lq"}, "monte_carlo": {"pathz": 10}})
    assert exc_info.value.location == "monte_carlo.pathz"
    assert "unknown key 'pathz'" in str(exc_info.value)


def test_empty_grid_is_rejected():
    with pytest.raises(ConfigError) as exc_info:
        validate_config({"problem": {"builtin": "lq"}, "grid": {"N": 0}})
    assert exc_info.value.location.startswith("grid")


def test_problem_is_required():
    with pytest.raises(ConfigError, match="missing required key 'problem'"):
        validate_config({})


def test_problem_needs_exactly_one_source():
    with pytest.raises(ConfigError):
        validate_config({"problem": {"builtin": "lq", "spec_file": "p.json"}})


def test_unknown_builtin():
    with pytest.raises(ConfigError, match="unknown builtin"):
        validate_config({"problem": {"builtin": "heston"}})


def test_eps_list_needs_three_values():
    with pytest.raises(ConfigError) as exc_info:
        validate_config({"problem": {"builtin": "lq"}, "checks": {"eps_list": [0.1, 0.01]}})
    assert exc_info.value.location == "checks.eps_list"


def test_bench_criteria_are_numbered():
    with pytest.raises(ConfigError):
        validate_config({"problem": {"builtin": "lq"}, "bench": {"criteria": [0, 11]}})


# ============================================================================
# HASH & OVERRIDES
# ============================================================================

def test_hash_tracks_content():
    a = validate_config({"problem": {"builtin": "lq"}})
    b = validate_config({"problem": {"builtin": "lq"}, "grid": {"N": 100}})
    c = validate_config({"problem": {"builtin": "lq"}, "grid": {"N": 50}})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 64


def test_overrides(small_config):
    config = validate_config(small_config)
    updated = config.with_overrides(seed=9, paths=300, output_dir="elsewhere")
    assert updated.monte_carlo.seed == 9
    assert updated.monte_carlo.paths == 300
    assert updated.outputs.directory == "elsewhere"
    assert config.monte_carlo.seed == 5
    assert updated.config_hash() != config.config_hash()
    with pytest.raises(ConfigError):
        config.with_overrides(paths=1)


# ============================================================================
# BUILDERS
# ============================================================================

def test_builtin_params_reach_the_problem():
    config = validate_config({"problem": {"builtin": "lq", "params": {"qx": 3.0}}})
    spec = config.build_problem()
    assert spec.source["builtin"] == "lq"
    assert spec.source["params"]["qx"] == 3.0


def test_bad_param_is_located():
    config = validate_config({"problem": {"builtin": "lq", "params": {"qx": "lots"}}})
    with pytest.raises(ConfigError) as exc_info:
        config.build_problem()
    assert exc_info.value.location == "problem.params.qx"


def test_problem_file_is_relative_to_the_config(tmp_path):
    (tmp_path / "problem.json").write_text(
        json.dumps({"builtin": "lq", "params": {"T": 2.0}}), encoding="utf-8")
    config = validate_config({"problem": {"spec_file": "problem.json"}})
    spec = config.build_problem(base_dir=tmp_path)
    assert spec.T == 2.0
    assert config.build_grid(spec).T == 2.0


def test_malformed_problem_file(tmp_path):
    (tmp_path / "problem.json").write_text(json.dumps([1, 2]), encoding="utf-8")
    config = validate_config({"problem": {"spec_file": "problem.json"}})
    with pytest.raises(ConfigError) as exc_info:
        config.build_problem(base_dir=tmp_path)
    assert exc_info.value.location == "problem.spec_file"


def test_grid_horizon_must_match_the_problem():
    config = validate_config({"problem": {"builtin": "lq"}, "grid": {"T": 2.0}})
    with pytest.raises(ConfigError) as exc_info:
        config.build_grid(config.build_problem())
    assert exc_info.value.location == "grid.T"


def test_affine_policy_section():
    config = validate_config({"problem": {"builtin": "lq"},
                              "policy": {"kind": "affine", "bias": 0.1, "gain": -0.2,
                                         "blocks": 2}})
    spec = config.build_problem()
    policy = config.build_policy(spec, 8)
    assert policy.blocks == 2
    assert policy.steps == 8
    assert policy.theta[1, 0].tolist() == pytest.approx([0.1, -0.2])


def test_too_many_blocks():
    config = validate_config({"problem": {"builtin": "lq"}, "policy": {"blocks": 20}})
    with pytest.raises(ConfigError) as exc_info:
        config.build_policy(config.build_problem(), 8)
    assert exc_info.value.location == "policy.blocks"


def test_policy_file_is_resampled(tmp_path):
    config = validate_config({"problem": {"builtin": "lq"},
                              "policy": {"kind": "file", "file": "policy.json"}})
    spec = config.build_problem()
    saved = ControlPolicy.affine(spec.control_set, 4, bias=0.3, gain=0.0, blocks=2)
    (tmp_path / "policy.json").write_text(json.dumps({"policy": saved.to_dict()}),
                                          encoding="utf-8")
    policy = config.build_policy(spec, 8, base_dir=tmp_path)
    assert policy.steps == 8
    assert policy.blocks == 2
    assert policy.theta.tolist() == saved.theta.tolist()


def test_missing_policy_file(tmp_path):
    config = validate_config({"problem": {"builtin": "lq"},
                              "policy": {"kind": "file", "file": "absent.json"}})
    with pytest.raises(ConfigError) as exc_info:
        config.build_policy(config.build_problem(), 8, base_dir=tmp_path)
    assert exc_info.value.location == "policy.file"


def test_file_policy_needs_a_path():
    with pytest.raises(ConfigError):
        validate_config({"problem": {"builtin": "lq"}, "policy": {"kind": "file"}})


# ============================================================================
# PARSING
# ============================================================================

def test_parse_config(write_config, small_config):
    config = parse_config(write_config(small_config))
    assert isinstance(config, ExperimentConfig)
    assert config.grid.N == 8


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError) as exc_info:
        parse_config(tmp_path / "nope.json")
    assert exc_info.value.location == "--config"


def test_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="invalid JSON") as exc_info:
        parse_config(path)
    assert exc_info.value.location == str(path)
