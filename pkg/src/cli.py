#!/usr/bin/env python3
"""
Command Line - Binds run configs to dataset generation, stage runs and the protocol

    python -m src.cli generate          --config config/config.json
    python -m src.cli pretrain          --config config/config.json --loss Combo
    python -m src.cli finetune          --config config/config.json --init-checkpoint runs/.../SR-PT/checkpoint.pt
    python -m src.cli infer             --config config/config.json
    python -m src.cli train-classifier  --config config/config.json
    python -m src.cli protocol          --config config/config.json --workers 2

Every command validates the full configuration before any compute and writes
resolved_config.json into its run directory. Exit code is 0 only when all
requested work succeeded.
"""

import argparse
import json
import logging
import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from .config import (
    Backbone, LossKind, RunConfig, SrFamily, Stage, StageConfig,
    build_run_config, load_config_document, run_directory, write_resolved_config,
)
from .data import export_dataset, generate_synthetic, load_dataset, make_pairs, split, validation_split
from .exceptions import ConfigurationError
from .models import Checkpoint
from .pipeline import (
    CHECKPOINT_NAME, initial_sr_model, planned_steps, protocol_cells, run_full_protocol,
    run_sr_finetune, run_sr_inference, run_sr_pretrain, train_classifier,
)
from .reporting import error_map
from .utils import set_nested, setup_logging

logger = logging.getLogger(__name__)

COMMANDS = ("generate", "pretrain", "finetune", "infer", "train-classifier", "protocol")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INVALID_CONFIG = 2

# stage each command runs; the rest keep the configured stage
COMMAND_STAGES = {
    "pretrain": Stage.SR_PT,
    "finetune": Stage.SR_FT,
    "infer": Stage.SR_I,
}

# flag -> dotted path in the config document
FLAG_PATHS = {
    "seed": "seed",
    "output_dir": "output_dir",
    "workers": "workers",
    "device": "device",
    "epochs": "stage.epochs",
    "batch_size": "stage.batch_size",
    "lr": "stage.learning_rate",
    "family": "stage.sr_model.family",
    "loss": "stage.loss.kind",
    "classifier": "stage.classifier.backbone",
    "init_checkpoint": "stage.init_checkpoint",
    "guide_checkpoint": "stage.guide_checkpoint",
    "log_level": "logging.level",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m src.cli",
        description="Classification-aware super-resolution for SAR ship chips"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    for name in COMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", type=str, default=None,
                         help="JSON run config (default: built-in defaults)")
        sub.add_argument("--output-dir", type=str, default=None,
                         help="Root for run directories (default: runs, or $CASR_OUTPUT_ROOT)")
        sub.add_argument("--seed", type=int, default=None, help="Master seed (default: 0)")
        sub.add_argument("--device", type=str, default=None, help="Torch device (default: cpu)")
        sub.add_argument("--log-level", type=str, default=None, help="Logging level (default: INFO)")
        sub.add_argument("--force", action="store_true",
                         help="Overwrite existing outputs instead of refusing or resuming")
        sub.add_argument("--dry-run", action="store_true",
                         help="Validate and print the planned optimizer steps without training")
        sub.add_argument("--data-root", type=str, default=None,
                         help="Class-folder dataset root, replaces the synthetic source")
        sub.add_argument("--show-progress", action="store_true", help="Show tqdm progress bars")

        if name != "generate":
            sub.add_argument("--epochs", type=int, default=None, help="Epochs (default: 10)")
            sub.add_argument("--batch-size", type=int, default=None, help="Batch size (default: 64)")
            sub.add_argument("--lr", type=float, default=None, help="Adam learning rate (default: 1e-4)")
            sub.add_argument("--family", choices=[f.value for f in SrFamily], default=None,
                             help="SR family (default: CARN_LITE)")
            sub.add_argument("--loss", choices=[k.value for k in LossKind], default=None,
                             help="SR loss (default: L1)")
            sub.add_argument("--classifier", choices=[b.value for b in Backbone], default=None,
                             help="Classifier backbone (default: SMALL_CNN)")
            sub.add_argument("--init-checkpoint", type=str, default=None,
                             help="SR checkpoint to start from (required by finetune)")
            sub.add_argument("--guide-checkpoint", type=str, default=None,
                             help="HR classifier checkpoint guiding finetune")
        else:
            sub.add_argument("--dataset-dir", type=str, default=None,
                             help="Where to write the dataset (default: <run dir>/dataset)")
        if name == "protocol":
            sub.add_argument("--workers", type=int, default=None, help="Parallel grid cells (default: 1)")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict:
    """Flag values as a nested config document; unset flags are absent"""
    overrides: Dict[str, Any] = {}
    for flag, path in FLAG_PATHS.items():
        value = getattr(args, flag, None)
        if value is not None:
            set_nested(overrides, path, value)

    if args.data_root is not None:
        overrides["data"] = {"root": args.data_root, "synthetic": None}
    if args.show_progress:
        overrides["show_progress"] = True
    if args.command == "protocol":
        # single-value flags narrow the sweep
        if getattr(args, "family", None):
            set_nested(overrides, "grid.sr_families", [args.family])
        if getattr(args, "loss", None):
            set_nested(overrides, "grid.losses", [args.loss])
        if getattr(args, "classifier", None):
            set_nested(overrides, "grid.classifiers", [args.classifier])
    if args.command in COMMAND_STAGES:
        set_nested(overrides, "stage.stage", COMMAND_STAGES[args.command].value)
    return overrides


def load_run_dataset(config: RunConfig) -> List:
    """Samples from the configured source"""
    if config.data.root is not None:
        return load_dataset(config.data.root, config.data.image_size)
    synthetic = config.data.synthetic
    return generate_synthetic(synthetic.n_per_class, synthetic.seed, synthetic.speckle_looks)


class CommandRunner:
    """Dispatch CLI commands against one validated run configuration"""

    def __init__(self, config: RunConfig, args: argparse.Namespace):
        """Initialize command runner"""
        self.config = config
        self.args = args
        self.run_dir = run_directory(config, args.command)

        # Register commands
        self.commands: Dict[str, Callable[[], Dict]] = {
            "generate": self.cmd_generate,
            "pretrain": self.cmd_pretrain,
            "finetune": self.cmd_finetune,
            "infer": self.cmd_infer,
            "train-classifier": self.cmd_train_classifier,
            "protocol": self.cmd_protocol,
        }

    def run(self, name: str) -> Dict[str, Any]:
        """Run a command, turning failures into an error payload"""
        if name not in self.commands:
            raise ValueError(f"Unknown command: {name}")

        try:
            if not self.args.dry_run:
                write_resolved_config(self.config, self.run_dir)
            result = self.commands[name]()
            success = result.pop("success", True)
            return {
                "success": success,
                "command": name,
                "run_dir": str(self.run_dir),
                "result": result,
                "timestamp": datetime.now(timezone.utc).isoformat()
            }
        except Exception as e:
            logger.error(f"Error running {name}: {e}")
            return {
                "success": False,
                "command": name,
                "error": f"{type(e).__name__}: {e}",
                "timestamp": datetime.now(timezone.utc).isoformat()
            }

    # Helpers

    def _splits(self):
        train, test = split(load_run_dataset(self.config), self.config.data.split)
        return train, test

    def _sr_pairs(self, train):
        """(fit, val) pairs; SR checkpoints are selected on a slice of the train split"""
        fit, val = validation_split(train, self.config.data.split)
        return make_pairs(fit), make_pairs(val)

    def _dry_run(self, n_train: int) -> Dict:
        stage = self.config.stage
        steps = planned_steps(n_train, stage.epochs, stage.batch_size)
        print(f"planned optimizer steps: {steps} ({stage.epochs} epochs x ceil({n_train}/{stage.batch_size}))")
        return {"dry_run": True, "n_train": n_train, "planned_steps": steps}

    def _finished(self, stage_dir: Path) -> Optional[Dict]:
        """Result of an earlier completed run in stage_dir, unless --force"""
        checkpoint_path = stage_dir / CHECKPOINT_NAME
        if checkpoint_path.exists() and not self.args.force:
            logger.info(f"{checkpoint_path} exists, skipping (use --force to retrain)")
            return {"skipped": True, "checkpoint": str(checkpoint_path)}
        return None

    def _guide(self, stage: StageConfig, train, test):
        """HR classifier from stage.guide_checkpoint, trained on HR images if absent"""
        if stage.guide_checkpoint:
            checkpoint = Checkpoint.load(stage.guide_checkpoint)
            if checkpoint.kind != "classifier":
                raise ConfigurationError(f"{stage.guide_checkpoint} is not a classifier checkpoint")
            return checkpoint.build_model()
        logger.info("No guide checkpoint given, training one on HR images")
        checkpoint, _ = train_classifier(
            stage, train, test, run_dir=self.run_dir / "guide",
            device=self.config.device, show_progress=self.config.show_progress,
            expected_lineage="HR"
        )
        return checkpoint.build_model()

    # Commands

    def cmd_generate(self) -> Dict:
        """Materialize the synthetic dataset as a class-folder tree"""
        synthetic = self.config.data.synthetic
        if synthetic is None:
            raise ConfigurationError("data.synthetic: required by generate")
        out_dir = Path(self.args.dataset_dir) if self.args.dataset_dir else self.run_dir / "dataset"
        occupied = out_dir.exists() and any(out_dir.iterdir())
        if occupied and not self.args.force:
            raise ConfigurationError(f"{out_dir} is not empty (use --force to overwrite)")
        if self.args.dry_run:
            return {"dry_run": True, "dataset_dir": str(out_dir), "files": 6 * synthetic.n_per_class}
        if occupied:
            shutil.rmtree(out_dir)

        samples = generate_synthetic(synthetic.n_per_class, synthetic.seed, synthetic.speckle_looks)
        manifest_path = export_dataset(samples, out_dir, manifest={
            "seed": synthetic.seed,
            "n_per_class": synthetic.n_per_class,
            "speckle_looks": synthetic.speckle_looks,
        })
        return {"dataset_dir": str(out_dir), "manifest": str(manifest_path), "files": len(samples)}

    def cmd_pretrain(self) -> Dict:
        train, _ = self._splits()
        fit_pairs, val_pairs = self._sr_pairs(train)
        if self.args.dry_run:
            return self._dry_run(len(fit_pairs))
        stage_dir = self.run_dir / Stage.SR_PT.value
        finished = self._finished(stage_dir)
        if finished:
            return finished

        checkpoint, log = run_sr_pretrain(
            self.config.stage, fit_pairs, val_pairs, stage_dir,
            self.config.device, self.config.show_progress
        )
        return {
            "checkpoint": str(stage_dir / CHECKPOINT_NAME),
            "digest": checkpoint.digest(),
            "steps": log.step_count,
            "best_epoch": checkpoint.metadata["best_epoch"],
            "val": log.epochs[-1]["val"],
        }

    def cmd_finetune(self) -> Dict:
        train, test = self._splits()
        fit_pairs, val_pairs = self._sr_pairs(train)
        if self.args.dry_run:
            return self._dry_run(len(fit_pairs))
        stage_dir = self.run_dir / Stage.SR_FT.value
        finished = self._finished(stage_dir)
        if finished:
            return finished

        stage = self.config.stage
        guide = self._guide(stage, train, test)
        checkpoint, log = run_sr_finetune(
            stage, fit_pairs, val_pairs, guide, stage_dir,
            self.config.device, self.config.show_progress
        )
        return {
            "checkpoint": str(stage_dir / CHECKPOINT_NAME),
            "digest": checkpoint.digest(),
            "steps": log.step_count,
            "best_epoch": checkpoint.metadata["best_epoch"],
            "val": log.epochs[-1]["val"],
        }

    def cmd_infer(self) -> Dict:
        _, test = self._splits()
        if self.args.dry_run:
            return {"dry_run": True, "n_test": len(test), "planned_steps": 0}
        stage_dir = self.run_dir / Stage.SR_I.value
        pairs = make_pairs(test)
        model = initial_sr_model(self.config.stage)
        checkpoint = Checkpoint.from_sr_model(model, Stage.SR_I)
        checkpoint.save(stage_dir / CHECKPOINT_NAME)
        sr_images, report = run_sr_inference(self.config.stage, pairs, model, device=self.config.device)

        for i in range(min(self.config.report.error_maps_per_cell, len(pairs))):
            error_map(pairs[i].hr, sr_images[i, 0]).save(stage_dir / "error_maps" / f"{i:03d}")
        stage_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = stage_dir / "metrics.json"
        with open(metrics_path, 'w') as f:
            json.dump(report.to_dict(), f, indent=2)
        return {"metrics": report.to_dict(), "metrics_file": str(metrics_path), "images": len(pairs),
                "checkpoint": str(stage_dir / CHECKPOINT_NAME), "checkpoint_digest": checkpoint.digest()}

    def cmd_train_classifier(self) -> Dict:
        train, test = self._splits()
        if self.args.dry_run:
            return self._dry_run(len(train))
        stage_dir = self.run_dir / "classifier"
        finished = self._finished(stage_dir)
        if finished:
            return finished

        checkpoint, report = train_classifier(
            self.config.stage, train, test, run_dir=stage_dir,
            device=self.config.device, show_progress=self.config.show_progress,
            expected_lineage="HR"
        )
        return {"checkpoint": str(stage_dir / CHECKPOINT_NAME), "digest": checkpoint.digest(),
                "report": report.to_dict()}

    def cmd_protocol(self) -> Dict:
        dataset = load_run_dataset(self.config)
        if self.args.dry_run:
            train, _ = split(dataset, self.config.data.split)
            plan = self._dry_run(len(train))
            plan["cells"] = [cell.key for cell in protocol_cells(self.config)]
            return plan
        if self.args.force and (self.run_dir / "cache").exists():
            shutil.rmtree(self.run_dir / "cache")

        report = run_full_protocol(self.config, dataset, self.run_dir)
        paths = report.write(self.run_dir / "report")
        return {
            "success": report.ok,
            "rows": len(report.rows),
            "failures": [f"{r['sr_family']}-{r['loss']}-{r['classifier']}: {r['error']}" for r in report.failures()],
            "files": {k: str(v) for k, v in paths.items()},
        }


def main(argv: Optional[List[str]] = None) -> int:
    """Run the command line"""
    args = build_parser().parse_args(argv)

    try:
        document = load_config_document(args.config)
        config = build_run_config(document, overrides_from_args(args))
    except ConfigurationError as e:
        print(str(e), file=sys.stderr)
        return EXIT_INVALID_CONFIG

    setup_logging(
        "src", config.logging.level, config.logging.file,
        config.logging.max_bytes, config.logging.backup_count
    )
    logger.info(f"Starting {args.command} (config {config.digest()[:12]})")

    outcome = CommandRunner(config, args).run(args.command)
    print(json.dumps(outcome, indent=2, default=str))
    return EXIT_OK if outcome["success"] else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
