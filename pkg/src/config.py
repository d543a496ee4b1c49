#!/usr/bin/env python3
"""
Run Configuration - Validated configuration models and config-file loading

Every document is validated in full before any compute starts. Unknown keys
are rejected and defaults are the standard training settings
(Adam, learning rate 1e-4, 10 epochs, batch size 64).
"""

import copy
import json
import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .exceptions import ConfigurationError
from .utils import config_hash, derive_seed, expand_env, merge_dicts

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "CASR_OUTPUT_ROOT"
DEFAULT_ENV_FILE = "config/.env"


class StrictModel(BaseModel):
    """Base for config sections: unknown keys are errors"""
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class LossKind(str, Enum):
    L1 = "L1"
    COMBO = "Combo"
    HYBRID = "Hybrid"


class Stage(str, Enum):
    SR_I = "SR-I"
    SR_PT = "SR-PT"
    SR_FT = "SR-FT"


class SrFamily(str, Enum):
    EDSR_LITE = "EDSR_LITE"
    CARN_LITE = "CARN_LITE"
    RCAN_LITE = "RCAN_LITE"


class Backbone(str, Enum):
    SMALL_CNN = "SMALL_CNN"
    RESNET18 = "RESNET18"
    RESNET50 = "RESNET50"
    VGG16 = "VGG16"
    MOBILENET_V2 = "MOBILENET_V2"
    DENSENET121 = "DENSENET121"


class LossSpec(StrictModel):
    """Loss family and weights"""
    kind: LossKind = LossKind.L1
    alpha: float = Field(0.5, ge=0.0)
    beta: float = Field(0.5, ge=0.0)
    hybrid_weights: Tuple[float, float, float] = (0.7, 0.2, 0.1)
    epsilon: float = Field(1e-8, gt=0.0)

    @field_validator("hybrid_weights")
    @classmethod
    def _check_hybrid_weights(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(w < 0 for w in value):
            raise ValueError("hybrid weights must be nonnegative")
        if abs(sum(value) - 1.0) > 1e-12:
            raise ValueError(f"hybrid weights must sum to 1, got {sum(value)}")
        return value


class SrModelConfig(StrictModel):
    """Lite super-resolution network"""
    family: SrFamily = SrFamily.CARN_LITE
    scale: int = 2
    channels: int = Field(32, ge=8)
    blocks: int = Field(4, ge=1)
    attention_reduction: int = Field(8, ge=1)
    identity_init: bool = False

    @field_validator("scale")
    @classmethod
    def _check_scale(cls, value: int) -> int:
        if value != 2:
            raise ValueError("only 2x super-resolution is supported")
        return value


class ClassifierConfig(StrictModel):
    """Classifier backbone with the replacement 4096-unit head"""
    backbone: Backbone = Backbone.SMALL_CNN
    head_hidden: int = Field(4096, ge=1)
    head_dropout: float = Field(0.5, ge=0.0, lt=1.0)
    num_classes: int = 6
    input_size: int = Field(64, ge=8)

    @field_validator("num_classes")
    @classmethod
    def _check_classes(cls, value: int) -> int:
        if value != 6:
            raise ValueError("the ship taxonomy has exactly 6 classes")
        return value


class SplitSpec(StrictModel):
    """Train/test split; val_fraction of the train split selects SR checkpoints"""
    train_fraction: float = Field(0.8, gt=0.0, lt=1.0)
    val_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    seed: int = 0
    stratified: bool = True


class SyntheticSpec(StrictModel):
    """Synthetic SAR-like ship generator parameters"""
    n_per_class: int = Field(125, ge=1)
    seed: int = 0
    speckle_looks: int = Field(4, ge=1)


class DataConfig(StrictModel):
    """Dataset source: a class-folder tree or the synthetic generator"""
    root: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    image_size: int = 64
    split: SplitSpec = Field(default_factory=SplitSpec)

    @model_validator(mode="after")
    def _check_source(self) -> "DataConfig":
        if self.root is None and self.synthetic is None:
            raise ValueError("data needs either 'root' or 'synthetic'")
        if self.root is not None and self.synthetic is not None:
            raise ValueError("data takes 'root' or 'synthetic', not both")
        return self


class StageConfig(StrictModel):
    """One pipeline stage with its optimizer settings"""
    stage: Stage = Stage.SR_PT
    loss: LossSpec = Field(default_factory=LossSpec)
    sr_model: SrModelConfig = Field(default_factory=SrModelConfig)
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)
    learning_rate: float = Field(1e-4, gt=0.0)
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(64, ge=1)
    seed: int = 0
    init_checkpoint: Optional[str] = None
    guide_checkpoint: Optional[str] = None
    joint_update: bool = False

    @model_validator(mode="after")
    def _check_stage_inputs(self) -> "StageConfig":
        if self.stage == Stage.SR_FT and not self.init_checkpoint:
            raise ValueError("stage.init_checkpoint is required for SR-FT (an SR-PT checkpoint)")
        return self


class GridConfig(StrictModel):
    """Protocol sweep"""
    sr_families: List[SrFamily] = Field(default_factory=lambda: [SrFamily.CARN_LITE])
    losses: List[LossKind] = Field(default_factory=lambda: [LossKind.COMBO])
    classifiers: List[Backbone] = Field(default_factory=lambda: [Backbone.SMALL_CNN])

    @model_validator(mode="after")
    def _check_nonempty(self) -> "GridConfig":
        for name in ("sr_families", "losses", "classifiers"):
            if not getattr(self, name):
                raise ValueError(f"grid.{name} must not be empty")
        return self


class ReportConfig(StrictModel):
    error_maps_per_cell: int = Field(4, ge=0)


class LoggingConfig(StrictModel):
    level: str = "INFO"
    file: Optional[str] = None
    max_bytes: int = 10485760
    backup_count: int = 10


class RunConfig(StrictModel):
    """Complete, validated run configuration"""
    seed: int = 0
    output_dir: str = "runs"
    device: str = "cpu"
    workers: int = Field(1, ge=1)
    show_progress: bool = False
    data: DataConfig = Field(default_factory=lambda: DataConfig(synthetic=SyntheticSpec()))
    stage: StageConfig = Field(default_factory=StageConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    report: ReportConfig = Field(default_factory=ReportConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    @model_validator(mode="before")
    @classmethod
    def _fan_out_seed(cls, values: Any) -> Any:
        """Unpinned stage, data and split seeds derive from the master seed"""
        if not isinstance(values, dict):
            return values
        values = dict(values)
        master = values.get("seed", 0)
        if not isinstance(master, int):
            return values

        stage = values.get("stage")
        if stage is None:
            values["stage"] = {"seed": master}
        elif isinstance(stage, dict):
            values["stage"] = {"seed": master, **stage}

        data = values.get("data")
        if data is None:
            data = {"synthetic": {}}
        if isinstance(data, dict):
            data = dict(data)
            if "root" not in data and "synthetic" not in data:
                data["synthetic"] = {}
            if isinstance(data.get("synthetic"), dict):
                data["synthetic"] = {"seed": derive_seed(master, "data"), **data["synthetic"]}
            split = data.get("split", {})
            if isinstance(split, dict):
                data["split"] = {"seed": derive_seed(master, "split"), **split}
            values["data"] = data
        return values

    def resolved(self) -> Dict[str, Any]:
        """The config with every default expanded, JSON-ready"""
        return self.model_dump(mode="json")

    def digest(self) -> str:
        return config_hash(self.resolved())


def format_validation_error(error: ValidationError) -> List[str]:
    """One 'field.path: message' line per violated field"""
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{location}: {item['msg']}")
    return lines


def load_config_document(config_path: Optional[str], env_file: str = DEFAULT_ENV_FILE) -> Dict:
    """Load a JSON config file and expand ${VAR} placeholders"""
    load_dotenv(env_file)
    if config_path is None:
        return {}
    try:
        with open(config_path, 'r') as f:
            document = json.load(f)
    except FileNotFoundError:
        logger.error(f"Config file not found: {config_path}")
        raise ConfigurationError(f"Config file not found: {config_path}")
    except json.JSONDecodeError as e:
        logger.error(f"Invalid JSON in config file: {config_path}")
        raise ConfigurationError(f"Invalid JSON in config file {config_path}: {e}")
    return expand_env(document)


def build_run_config(document: Dict, overrides: Optional[Dict] = None) -> RunConfig:
    """Validate document + overrides (flags > file > defaults)"""
    merged = copy.deepcopy(merge_dicts(document, overrides or {}))
    output_root = os.environ.get(OUTPUT_ROOT_ENV)
    if output_root and "output_dir" not in (overrides or {}):
        merged["output_dir"] = output_root

    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        problems = format_validation_error(e)
        for line in problems:
            logger.error(f"Config error - {line}")
        raise ConfigurationError("Invalid configuration:\n  " + "\n  ".join(problems)) from e


def load_run_config(config_path: Optional[str], overrides: Optional[Dict] = None) -> RunConfig:
    """Load, expand and validate a run configuration"""
    return build_run_config(load_config_document(config_path), overrides)


def write_resolved_config(config: RunConfig, run_dir: Path) -> Path:
    """Persist the exact resolved config next to the run's artifacts"""
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "resolved_config.json"
    with open(path, 'w') as f:
        json.dump(config.resolved(), f, indent=2, sort_keys=True)
    return path


def run_directory(config: RunConfig, command: str) -> Path:
    """<output_dir>/<command>-<config hash prefix>"""
    return Path(config.output_dir) / f"{command}-{config.digest()[:12]}"
