#!/usr/bin/env python3
"""
Tests for the command line
"""

import json
from pathlib import Path

import pytest

from src.cli import (
    EXIT_FAILED, EXIT_INVALID_CONFIG, EXIT_OK, CommandRunner, build_parser, main, overrides_from_args,
)
from src.config import Stage, build_run_config
from src.models import Checkpoint

TINY_DOCUMENT = {
    "seed": 0,
    "data": {"synthetic": {"n_per_class": 5, "seed": 0}},
    "stage": {
        "epochs": 1,
        "batch_size": 16,
        "learning_rate": 0.001,
        "sr_model": {"channels": 8, "blocks": 1},
        "classifier": {"head_hidden": 32},
    },
    "grid": {"sr_families": ["CARN_LITE"], "losses": ["Combo"], "classifiers": ["SMALL_CNN"]},
    "report": {"error_maps_per_cell": 1},
}


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    """Isolated working directory without an output-root override"""
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("CASR_OUTPUT_ROOT", raising=False)
    return tmp_path


def write_config(directory: Path, document: dict) -> str:
    path = directory / "config.json"
    path.write_text(json.dumps(document))
    return str(path)


def json_outcome(text: str) -> dict:
    """The JSON payload main prints last"""
    return json.loads(text[text.index("{"):])


def runner(argv):
    args = build_parser().parse_args(argv)
    document = json.loads(Path(args.config).read_text()) if args.config else {}
    return CommandRunner(build_run_config(document, overrides_from_args(args)), args)


def test_generate_writes_class_tree(workspace, capsys):
    """Test n_per_class=50 gives 300 files and a matching manifest"""
    config = write_config(workspace, {"data": {"synthetic": {"n_per_class": 50, "seed": 4}}})
    dataset = workspace / "ships"
    assert main(["generate", "--config", config, "--dataset-dir", str(dataset)]) == EXIT_OK

    files = sorted(dataset.glob("*/*.png"))
    assert len(files) == 300
    manifest = json.loads((dataset / "manifest.json").read_text())
    census = {d.name: len(list(d.glob("*.png"))) for d in dataset.iterdir() if d.is_dir()}
    assert manifest["counts"] == census
    assert set(census.values()) == {50}
    assert manifest["seed"] == 4

    outcome = json_outcome(capsys.readouterr().out)
    assert outcome["success"] and outcome["result"]["files"] == 300


def test_generate_is_byte_identical(workspace):
    """Test the same seed writes the same bytes"""
    config = write_config(workspace, {"data": {"synthetic": {"n_per_class": 3, "seed": 1}}})
    assert main(["generate", "--config", config, "--dataset-dir", "a"]) == EXIT_OK
    assert main(["generate", "--config", config, "--dataset-dir", "b"]) == EXIT_OK

    for path in sorted(Path("a").glob("*/*.png")):
        twin = Path("b") / path.relative_to("a")
        assert path.read_bytes() == twin.read_bytes()


def test_generate_refuses_occupied_directory(workspace):
    """Test an existing non-empty target needs --force"""
    config = write_config(workspace, {"data": {"synthetic": {"n_per_class": 2, "seed": 0}}})
    assert main(["generate", "--config", config, "--dataset-dir", "ds"]) == EXIT_OK
    assert main(["generate", "--config", config, "--dataset-dir", "ds"]) == EXIT_FAILED
    assert main(["generate", "--config", config, "--dataset-dir", "ds", "--force"]) == EXIT_OK
    assert len(list(Path("ds").glob("*/*.png"))) == 12


def test_finetune_without_init_checkpoint_is_invalid(workspace, capsys):
    """Test the validation error names the missing field"""
    assert main(["finetune"]) == EXIT_INVALID_CONFIG
    assert "init_checkpoint" in capsys.readouterr().err


def test_invalid_config_enumerates_every_field(workspace, capsys):
    """Test all violations are reported before any compute"""
    config = write_config(workspace, {"stage": {"learning_rate": -1, "epochs": 0}, "colour": "blue"})
    assert main(["pretrain", "--config", config]) == EXIT_INVALID_CONFIG
    err = capsys.readouterr().err
    assert "stage.learning_rate" in err
    assert "stage.epochs" in err
    assert "colour" in err
    assert not Path("runs").exists()


def test_missing_config_file(workspace):
    """Test a missing config file is a configuration error"""
    assert main(["pretrain", "--config", "nowhere.json"]) == EXIT_INVALID_CONFIG


def test_defaults_follow_training_settings():
    """Test default optimizer settings"""
    args = build_parser().parse_args(["pretrain"])
    config = build_run_config({}, overrides_from_args(args))
    assert config.stage.learning_rate == 1e-4
    assert config.stage.epochs == 10
    assert config.stage.batch_size == 64
    assert config.stage.stage.value == "SR-PT"
    assert config.workers == 1


def test_flags_override_file(workspace):
    """Test precedence flags > file > defaults"""
    config = write_config(workspace, {"seed": 3, "stage": {"epochs": 4, "batch_size": 8}})
    args = build_parser().parse_args(["pretrain", "--config", config, "--epochs", "2", "--loss", "Hybrid"])
    resolved = build_run_config(json.loads(Path(config).read_text()), overrides_from_args(args))
    assert resolved.stage.epochs == 2
    assert resolved.stage.batch_size == 8
    assert resolved.stage.loss.kind.value == "Hybrid"
    assert resolved.seed == 3 and resolved.stage.seed == 3


def test_protocol_flags_narrow_the_grid():
    """Test single-value flags become one-element grid lists"""
    args = build_parser().parse_args(["protocol", "--family", "RCAN_LITE", "--workers", "2"])
    config = build_run_config({}, overrides_from_args(args))
    assert [f.value for f in config.grid.sr_families] == ["RCAN_LITE"]
    assert config.workers == 2


def test_output_root_environment_override(monkeypatch, tmp_path):
    """Test CASR_OUTPUT_ROOT relocates run directories unless the flag is given"""
    monkeypatch.setenv("CASR_OUTPUT_ROOT", str(tmp_path / "elsewhere"))
    config = build_run_config({}, overrides_from_args(build_parser().parse_args(["pretrain"])))
    assert config.output_dir == str(tmp_path / "elsewhere")

    flagged = build_parser().parse_args(["pretrain", "--output-dir", "mine"])
    assert build_run_config({}, overrides_from_args(flagged)).output_dir == "mine"


def test_dry_run_prints_step_count(workspace, capsys):
    """Test --dry-run reports planned steps and trains nothing"""
    config = write_config(workspace, {"data": {"synthetic": {"n_per_class": 5, "seed": 0}}})
    assert main(["pretrain", "--config", config, "--dry-run"]) == EXIT_OK

    out = capsys.readouterr().out
    assert "planned optimizer steps: 10" in out
    assert json_outcome(out)["result"]["planned_steps"] == 10
    assert not Path("runs").exists()


def test_pretrain_resumes_finished_run(workspace):
    """Test a second pretrain skips the existing checkpoint unless forced"""
    config = write_config(workspace, TINY_DOCUMENT)
    first = runner(["pretrain", "--config", config]).run("pretrain")
    assert first["success"]
    assert first["result"]["steps"] == 2
    assert Path(first["result"]["checkpoint"]).exists()
    assert (Path(first["run_dir"]) / "resolved_config.json").exists()

    second = runner(["pretrain", "--config", config]).run("pretrain")
    assert second["result"]["skipped"]

    forced = runner(["pretrain", "--config", config, "--force"]).run("pretrain")
    assert forced["result"]["digest"] == first["result"]["digest"]


def test_finetune_from_pretrained_checkpoint(workspace):
    """Test finetune trains a guide on HR images when none is given"""
    config = write_config(workspace, TINY_DOCUMENT)
    pretrained = runner(["pretrain", "--config", config]).run("pretrain")["result"]["checkpoint"]

    outcome = runner(["finetune", "--config", config, "--init-checkpoint", pretrained]).run("finetune")
    assert outcome["success"], outcome.get("error")
    assert Path(outcome["result"]["checkpoint"]).exists()
    assert (Path(outcome["run_dir"]) / "guide" / "checkpoint.pt").exists()


def test_infer_and_train_classifier(workspace):
    """Test inference metrics and HR classifier training"""
    config = write_config(workspace, TINY_DOCUMENT)

    inferred = runner(["infer", "--config", config]).run("infer")
    assert inferred["success"]
    metrics = json.loads(Path(inferred["result"]["metrics_file"]).read_text())
    assert metrics["psnr_db"] > 0
    assert len(list(Path(inferred["run_dir"]).glob("SR-I/error_maps/*.png"))) == 1
    saved = Checkpoint.load(inferred["result"]["checkpoint"])
    assert saved.kind == "sr" and saved.stage == Stage.SR_I
    assert saved.digest() == inferred["result"]["checkpoint_digest"]
    assert Path(inferred["result"]["checkpoint"]).parent.name == "SR-I"

    trained = runner(["train-classifier", "--config", config]).run("train-classifier")
    assert trained["success"]
    assert 0.0 <= trained["result"]["report"]["macro_f1"] <= 1.0


def test_failed_command_returns_error_payload(workspace):
    """Test exceptions inside a command become a failure outcome"""
    config = write_config(workspace, {**TINY_DOCUMENT, "data": {"root": "no-such-dataset"}})
    outcome = runner(["pretrain", "--config", config]).run("pretrain")
    assert not outcome["success"]
    assert outcome["error"].startswith("IngestionError")


def test_protocol_command_writes_report_and_resumes(workspace, capsys):
    """Test a one-cell protocol run, then an idempotent rerun"""
    config = write_config(workspace, TINY_DOCUMENT)
    assert main(["protocol", "--config", config]) == EXIT_OK
    outcome = json_outcome(capsys.readouterr().out)

    run_dir = Path(outcome["run_dir"])
    assert (run_dir / "resolved_config.json").exists()
    report = json.loads((run_dir / "report" / "report.json").read_text())
    stages = [r["stage"] for r in report["rows"] if r["kind"] == "cell"]
    assert stages == ["SR-I", "SR-PT", "SR-FT"]
    assert any("SR-I" in note for note in report["metadata"]["deviations"])

    assert main(["protocol", "--config", config]) == EXIT_OK
    rerun = json.loads((run_dir / "report" / "report.json").read_text())
    assert rerun["metadata"]["cache"]["hits"] == 3
    assert [r["macro_f1"] for r in rerun["rows"]] == [r["macro_f1"] for r in report["rows"]]


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
