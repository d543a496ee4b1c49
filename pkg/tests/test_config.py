#!/usr/bin/env python3
"""
Tests for run configuration loading and validation
"""

import json

import pytest

from src.config import (
    LossKind, RunConfig, SrFamily, Stage, build_run_config, load_config_document,
    load_run_config, run_directory, write_resolved_config,
)
from src.data import generate_synthetic, split
from src.exceptions import ConfigurationError
from src.utils import derive_seed


def test_defaults(monkeypatch):
    """Test an empty document yields the standard training settings"""
    monkeypatch.delenv("CASR_OUTPUT_ROOT", raising=False)
    config = build_run_config({})
    assert config.seed == 0
    assert config.output_dir == "runs"
    assert config.stage.learning_rate == 1e-4
    assert config.stage.epochs == 10
    assert config.stage.batch_size == 64
    assert config.stage.loss.kind == LossKind.L1
    assert config.stage.loss.hybrid_weights == (0.7, 0.2, 0.1)
    assert config.stage.classifier.head_hidden == 4096
    assert config.data.synthetic is not None and config.data.root is None
    assert config.data.split.train_fraction == 0.8


def test_overrides_take_precedence():
    """Test flags > file > defaults"""
    document = {"stage": {"epochs": 3, "batch_size": 16}}
    config = build_run_config(document, {"stage": {"epochs": 5}})
    assert config.stage.epochs == 5
    assert config.stage.batch_size == 16


def test_master_seed_propagates_to_stage():
    """Test the stage seed follows the master seed unless pinned"""
    assert build_run_config({"seed": 7}).stage.seed == 7
    assert build_run_config({"seed": 7, "stage": {"epochs": 2}}).stage.seed == 7
    assert build_run_config({"seed": 7, "stage": {"seed": 1}}).stage.seed == 1


def test_master_seed_drives_data_and_split():
    """Test unpinned data and split seeds follow the master seed"""
    first, second = build_run_config({"seed": 0}), build_run_config({"seed": 1})
    assert first.data.split.seed == derive_seed(0, "split")
    assert first.data.synthetic.seed == derive_seed(0, "data")
    assert second.data.split.seed != first.data.split.seed
    assert second.data.synthetic.seed != first.data.synthetic.seed

    dataset = generate_synthetic(n_per_class=10, seed=0)
    members = [
        {s.source for s in split(dataset, config.data.split)[0]} for config in (first, second)
    ]
    assert members[0] != members[1]

    pinned = build_run_config({"seed": 1, "data": {"synthetic": {"seed": 5}, "split": {"seed": 9}}})
    assert pinned.data.synthetic.seed == 5 and pinned.data.split.seed == 9
    assert build_run_config({"seed": 1, "data": {"root": "ships"}}).data.split.seed == second.data.split.seed
    assert RunConfig(seed=1).data.split.seed == second.data.split.seed


def test_errors_list_every_field():
    """Test all violations appear in one error"""
    document = {
        "stage": {"learning_rate": 0, "batch_size": 0, "sr_model": {"family": "SRGAN"}},
        "workers": 0,
    }
    with pytest.raises(ConfigurationError) as excinfo:
        build_run_config(document)
    message = str(excinfo.value)
    for field in ("stage.learning_rate", "stage.batch_size", "stage.sr_model.family", "workers"):
        assert field in message


def test_unknown_keys_rejected():
    """Test a misspelled key is an error, not silently ignored"""
    with pytest.raises(ConfigurationError) as excinfo:
        build_run_config({"stage": {"epoch": 3}})
    assert "stage.epoch" in str(excinfo.value)


def test_hybrid_weights_must_sum_to_one():
    """Test hybrid weight validation"""
    with pytest.raises(ConfigurationError):
        build_run_config({"stage": {"loss": {"kind": "Hybrid", "hybrid_weights": [0.5, 0.2, 0.1]}}})
    with pytest.raises(ConfigurationError):
        build_run_config({"stage": {"loss": {"hybrid_weights": [1.2, -0.1, -0.1]}}})
    config = build_run_config({"stage": {"loss": {"kind": "Hybrid", "hybrid_weights": [0.5, 0.25, 0.25]}}})
    assert config.stage.loss.kind == LossKind.HYBRID


def test_fixed_constants():
    """Test scale and class count cannot be changed"""
    with pytest.raises(ConfigurationError):
        build_run_config({"stage": {"sr_model": {"scale": 4}}})
    with pytest.raises(ConfigurationError):
        build_run_config({"stage": {"classifier": {"num_classes": 10}}})


def test_finetune_requires_init_checkpoint():
    """Test SR-FT without an SR-PT checkpoint is invalid"""
    with pytest.raises(ConfigurationError) as excinfo:
        build_run_config({"stage": {"stage": "SR-FT"}})
    assert "init_checkpoint" in str(excinfo.value)

    config = build_run_config({"stage": {"stage": "SR-FT", "init_checkpoint": "pt.pt"}})
    assert config.stage.stage == Stage.SR_FT


def test_data_source_is_exclusive():
    """Test exactly one of root and synthetic"""
    with pytest.raises(ConfigurationError):
        build_run_config({"data": {"root": "ships", "synthetic": {"n_per_class": 2}}})
    with pytest.raises(ConfigurationError):
        build_run_config({"data": {"synthetic": None}})
    assert build_run_config({"data": {"root": "ships"}}).data.root == "ships"


def test_empty_grid_rejected():
    """Test protocol sweeps need at least one value per axis"""
    with pytest.raises(ConfigurationError) as excinfo:
        build_run_config({"grid": {"losses": []}})
    assert "losses" in str(excinfo.value)


def test_load_config_document_expands_environment(tmp_path, monkeypatch):
    """Test ${VAR} placeholders are filled from the environment"""
    monkeypatch.setenv("CASR_TEST_DATA", "/data/ships")
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"data": {"root": "${CASR_TEST_DATA}"}}))

    document = load_config_document(str(path), env_file=str(tmp_path / "missing.env"))
    assert document == {"data": {"root": "/data/ships"}}


def test_load_config_document_errors(tmp_path):
    """Test missing and malformed files"""
    with pytest.raises(ConfigurationError):
        load_config_document(str(tmp_path / "missing.json"))

    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_config_document(str(broken))

    assert load_config_document(None, env_file=str(tmp_path / "missing.env")) == {}


def test_load_run_config(tmp_path, monkeypatch):
    """Test file loading plus overrides"""
    monkeypatch.delenv("CASR_OUTPUT_ROOT", raising=False)
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"stage": {"sr_model": {"family": "RCAN_LITE"}}}))
    config = load_run_config(str(path), {"seed": 2})
    assert config.stage.sr_model.family == SrFamily.RCAN_LITE
    assert config.seed == 2


def test_resolved_config_and_run_directory(tmp_path):
    """Test the resolved config is complete and keys the run directory"""
    config = RunConfig(output_dir=str(tmp_path))
    path = write_resolved_config(config, tmp_path / "run")
    written = json.loads(path.read_text())
    assert written == config.resolved()
    assert written["stage"]["sr_model"]["family"] == "CARN_LITE"
    assert RunConfig.model_validate(written).digest() == config.digest()

    directory = run_directory(config, "pretrain")
    assert directory.parent == tmp_path
    assert directory.name == f"pretrain-{config.digest()[:12]}"
    assert run_directory(RunConfig(output_dir=str(tmp_path), seed=1), "pretrain") != directory


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
