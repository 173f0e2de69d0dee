# tests/test_config.py
from pathlib import Path

import pytest

from app.config import Settings, config_hash, load_config, parse_config
from app.errors import (
    CheckpointError,
    ConfigError,
    NumericError,
    ReplicaError,
    exit_code_for,
)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def test_defaults_describe_a_complete_experiment():
    config = parse_config({})
    assert config.method == "sms"
    assert config.seeds == [0]
    assert config.arch.hidden == [64, 64]
    assert config.pruning.m == 3
    assert config.pruning.m_for_phase(2) == 3
    assert config.pretrain.original_curve().epochs == 30


@pytest.mark.parametrize(
    "raw",
    [
        {"colour": "blue"},
        {"pruning": {"target_sparsity": 0.9, "phases_count": 3}},
        {"method": "lottery"},
        {"pruning": {"target_sparsity": 1.0}},
        {"pruning": {"phases": 2, "m_per_phase": [1, 2, 3]}},
        {"seeds": []},
        {"seeds": [-1]},
        {"dataset": {"source": "csv"}},
        {"dataset": {"severities": [0, 3]}},
        {"method": "imp_reprune", "pruning": {"m": 1}},
        {"method": "bimp", "pretrain": {"epochs": 10}, "dst": {"bimp_pretrain_epochs": 9}},
        {"method": "gmp", "pretrain": {"epochs": 0}},
        {"pruning": {"vary": "weight_decay", "weight_decay_grid": []}},
        {"pretrain": {"final_lr": 0.0}},
        {"pretrain": {"final_lr": 0.0}, "pruning": {"schedule": "FT"}},
    ],
)
def test_invalid_configs_are_config_errors(raw):
    with pytest.raises(ConfigError):
        parse_config(raw)


@pytest.mark.parametrize(
    "raw",
    [
        {"pruning": {"schedule": "LLR"}},
        {"pruning": {"schedule": "ALLR", "initial_lr": 0.05}},
        {"method": "gmp"},
    ],
)
def test_zero_final_lr_is_allowed_when_retraining_does_not_use_it(raw):
    raw = {**raw, "pretrain": {"final_lr": 0.0}}
    assert parse_config(raw).pretrain.final_lr == 0.0


def test_load_config_reads_toml(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(
        'method = "imp"\nseeds = [1, 2]\n\n[pruning]\ntarget_sparsity = 0.8\nphases = 2\n'
    )
    config = load_config(path)
    assert config.method == "imp"
    assert config.seeds == [1, 2]
    assert config.pruning.phases == 2


def test_load_config_failures_are_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("method = \n")
    with pytest.raises(ConfigError, match="invalid TOML"):
        load_config(broken)


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.toml")), ids=lambda p: p.name)
def test_shipped_configs_are_valid(path):
    assert load_config(path).name


def test_config_hash_is_stable_and_sensitive():
    first = parse_config({"seeds": [0, 1]})
    assert config_hash(first) == config_hash(parse_config({"seeds": [0, 1]}))
    assert config_hash(first) != config_hash(parse_config({"seeds": [0, 2]}))
    assert len(config_hash(first)) == 64


def test_settings_read_prefixed_environment(monkeypatch):
    monkeypatch.setenv("SPARSESOUP_THREADS", "8")
    monkeypatch.setenv("SPARSESOUP_LOG_LEVEL", "DEBUG")
    settings = Settings()
    assert settings.threads == 8
    assert settings.log_level == "DEBUG"


def test_exit_codes():
    assert exit_code_for(None) == 0
    assert exit_code_for(ConfigError("bad")) == 1
    assert exit_code_for(NumericError("dense0")) == 2
    assert exit_code_for(CheckpointError("corrupt")) == 2
    assert exit_code_for(RuntimeError("boom")) == 2


def test_replica_error_names_phase_and_replica():
    error = ReplicaError(2, 1, NumericError("dense1"))
    assert error.phase == 2
    assert error.replica == 1
    assert "dense1" in str(error)
