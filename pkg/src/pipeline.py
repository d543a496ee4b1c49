#!/usr/bin/env python3
"""
Pipeline - Classification-aware super-resolution stages

    SR-I   inference with an SR model that never saw the current data
    SR-PT  image-quality pretraining with L1, Combo or Hybrid loss
    SR-FT  fine-tuning on L_SR + MSE(classifier(sr), classifier(hr))

Every stage's SR outputs train a fresh evaluation classifier whose macro-F1
is reported next to the stage's PSNR/SSIM. run_full_protocol sweeps the
configured (SR family x loss x classifier) grid and adds LR, HR and SRHR
baseline rows.
"""

import concurrent.futures
import hashlib
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from .cache import ResultCache
from .config import Backbone, LossKind, LossSpec, RunConfig, SrFamily, Stage, StageConfig, run_directory
from .data import (
    LabeledSample, PairedSample, label_histogram, make_pairs, relabel_images,
    split, stack_images, stack_labels, upsample_bicubic, validation_split,
)
from .exceptions import CheckpointError, ConfigurationError, DomainError, NumericError, TrainingError
from .losses import LossValue, classification_loss, merged_loss, sr_criterion
from .metrics import CLASS_NAMES, NUM_CLASSES, MetricReport, image_quality
from .models import (
    Checkpoint, ShipClassifier, SuperResolutionNet, build_classifier, build_sr_model,
    classifier_forward, load_parameters, parameters, sr_forward,
)
from .reporting import SR_I_DEVIATION, SRHR_NOTE, ProtocolReport, error_map
from .utils import derive_seed, seed_fanout

logger = logging.getLogger(__name__)

TRAIN_LOG_NAME = "train_log.jsonl"
CHECKPOINT_NAME = "checkpoint.pt"
STAGE_SEED_NAMES = ("sr_init", "classifier_init", "shuffle")


class TrainLog:
    """Line-delimited training record: a header, then step and epoch records"""

    def __init__(self, header: Optional[Dict] = None, path: Optional[Union[str, Path]] = None):
        self.header = dict(header or {})
        self.path = Path(path) if path else None
        self.records: List[Dict] = []

        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, 'w') as f:
                f.write(json.dumps({"type": "header", **self.header}, sort_keys=True, default=str) + "\n")

    def add(self, record: Dict) -> Dict:
        self.records.append(record)
        if self.path:
            with open(self.path, 'a') as f:
                f.write(json.dumps(record, sort_keys=True, default=str) + "\n")
        return record

    def log_step(self, epoch: int, step: int, loss: LossValue, seconds: float) -> Dict:
        return self.add({"type": "step", "epoch": epoch, "step": step, "seconds": seconds, **loss.record()})

    def log_epoch(self, epoch: int, train_loss: float, val_loss: Optional[float],
                  report: Optional[MetricReport], seconds: float) -> Dict:
        return self.add({
            "type": "epoch",
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val": report.to_dict() if report else None,
            "seconds": seconds,
        })

    def log_event(self, event: str, **fields) -> Dict:
        return self.add({"type": event, **fields})

    @property
    def steps(self) -> List[Dict]:
        return [r for r in self.records if r["type"] == "step"]

    @property
    def epochs(self) -> List[Dict]:
        return [r for r in self.records if r["type"] == "epoch"]

    @property
    def step_count(self) -> int:
        return len(self.steps)

    def trajectory(self, key: str = "total") -> List[float]:
        return [r[key] for r in self.steps]

    def epoch_means(self, key: str = "total") -> List[float]:
        """Mean of a step component per epoch, in epoch order"""
        by_epoch: Dict[int, List[float]] = {}
        for record in self.steps:
            by_epoch.setdefault(record["epoch"], []).append(record[key])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    @classmethod
    def read(cls, path: Union[str, Path]) -> "TrainLog":
        log = cls()
        with open(path, 'r') as f:
            for line in f:
                if not line.strip():
                    continue
                record = json.loads(line)
                if record["type"] == "header":
                    record.pop("type")
                    log.header = record
                else:
                    log.records.append(record)
        log.path = Path(path)
        return log


def planned_steps(n_train: int, epochs: int, batch_size: int) -> int:
    """Optimizer steps of a run: epochs x ceil(n / batch)"""
    return epochs * math.ceil(n_train / batch_size)


def _optimizer(params, learning_rate: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=learning_rate, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)


def _loader(tensors: Sequence[torch.Tensor], batch_size: int, seed: int) -> DataLoader:
    generator = torch.Generator().manual_seed(seed)
    return DataLoader(TensorDataset(*tensors), batch_size=batch_size, shuffle=True, generator=generator, drop_last=False)


def _fit(
    model: nn.Module,
    trainable: Sequence[nn.Parameter],
    loader: DataLoader,
    step_fn: Callable[[Sequence[torch.Tensor]], LossValue],
    val_fn: Callable[[], Tuple[Optional[float], Optional[MetricReport]]],
    config: StageConfig,
    log: TrainLog,
    desc: str,
    show_progress: bool = False
) -> Tuple[int, Optional[Dict[str, torch.Tensor]]]:
    """Adam loop with per-epoch validation; returns (best epoch, its weights)"""
    optimizer = _optimizer(trainable, config.learning_rate)
    step = 0
    best_epoch, best_loss, best_state = 0, math.inf, None

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        epoch_losses = []
        for batch in tqdm(loader, desc=f"{desc} {epoch}/{config.epochs}", disable=not show_progress, leave=False):
            step_started = time.perf_counter()
            try:
                loss = step_fn(batch)
            except NumericError as e:
                log.log_event("abort", epoch=epoch, step=step + 1, error=str(e))
                logger.error(f"{desc}: non-finite loss at epoch {epoch}, step {step + 1}: {e}")
                raise
            optimizer.zero_grad(set_to_none=True)
            loss.total.backward()
            optimizer.step()
            step += 1
            epoch_losses.append(loss.item())
            log.log_step(epoch, step, loss, time.perf_counter() - step_started)

        train_loss = float(np.mean(epoch_losses))
        val_loss, report = val_fn()
        log.log_epoch(epoch, train_loss, val_loss, report, time.perf_counter() - started)

        monitored = val_loss if val_loss is not None else train_loss
        if monitored < best_loss:
            best_epoch, best_loss, best_state = epoch, monitored, parameters(model)
        logger.info(f"{desc} epoch {epoch}/{config.epochs}: train {train_loss:.6f}, val {val_loss}")

    return best_epoch, best_state


def _stage_header(config: StageConfig, n_train: int, n_val: int) -> Dict:
    return {
        "stage": config.stage.value,
        "seed": config.seed,
        "seeds": seed_fanout(config.seed, STAGE_SEED_NAMES),
        "config": config.model_dump(mode="json"),
        "n_train": n_train,
        "n_val": n_val,
        "planned_steps": planned_steps(n_train, config.epochs, config.batch_size),
        "optimizer": {"name": "Adam", "betas": [0.9, 0.999], "eps": 1e-8, "weight_decay": 0.0},
        "shuffle": "per-epoch, seeded by seeds.shuffle",
    }


def _require_stage(config: StageConfig, stage: Stage) -> None:
    if config.stage != stage:
        raise ConfigurationError(f"Expected a {stage.value} stage config, got {config.stage.value}")


def _pair_tensors(pairs: Sequence[PairedSample]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    return stack_images(pairs, "lr"), stack_images(pairs, "hr"), stack_labels(pairs)


def super_resolve(model: SuperResolutionNet, lr_images: torch.Tensor, batch_size: int = 64,
                  device: str = "cpu") -> torch.Tensor:
    """Eval-mode SR of a (N, 1, h, w) batch, returned on the CPU"""
    model.eval()
    outputs = []
    with torch.no_grad():
        for chunk in torch.split(lr_images, batch_size):
            outputs.append(sr_forward(model, chunk.to(device)).cpu())
    return torch.cat(outputs)


def predict_logits(model: ShipClassifier, images: torch.Tensor, batch_size: int = 64,
                   device: str = "cpu") -> torch.Tensor:
    outputs = []
    with torch.no_grad():
        for chunk in torch.split(images, batch_size):
            outputs.append(classifier_forward(model, chunk.to(device), "eval").cpu())
    return torch.cat(outputs)


def initial_sr_model(config: StageConfig) -> SuperResolutionNet:
    """Fresh SR model, or one loaded from config.init_checkpoint"""
    model = build_sr_model(config.sr_model, seed_fanout(config.seed)["sr_init"])
    if config.init_checkpoint:
        checkpoint = Checkpoint.load(config.init_checkpoint)
        if checkpoint.kind != "sr":
            raise CheckpointError(f"{config.init_checkpoint} holds a {checkpoint.kind} model, not an SR model")
        load_parameters(model, checkpoint.parameters)
        logger.info(f"Initialized SR model from {config.init_checkpoint} ({checkpoint.stage})")
    return model


def _save_outputs(run_dir: Optional[Path], checkpoint: Checkpoint) -> None:
    if run_dir is not None:
        checkpoint.save(Path(run_dir) / CHECKPOINT_NAME)


def run_sr_inference(
    config: StageConfig,
    pairs: Sequence[PairedSample],
    model: Optional[SuperResolutionNet] = None,
    device: str = "cpu"
) -> Tuple[torch.Tensor, MetricReport]:
    """SR-I: super-resolve every LR input without touching the weights"""
    _require_stage(config, Stage.SR_I)
    if not pairs:
        raise DomainError("SR inference needs at least one pair")
    model = (model if model is not None else initial_sr_model(config)).to(device)

    lr_images, hr_images, _ = _pair_tensors(pairs)
    sr_images = super_resolve(model, lr_images, config.batch_size, device)
    report = image_quality(sr_images, hr_images)
    logger.info(f"SR-I {config.sr_model.family.value}: PSNR {report.psnr_db:.3f} dB, SSIM {report.ssim:.4f}")
    return sr_images, report


def _sr_validation(model, val, spec: LossSpec, batch_size: int, device: str,
                   guide: Optional[ShipClassifier] = None):
    if val is None:
        return None, None
    val_lr, val_hr, _ = val
    sr_images = super_resolve(model, val_lr, batch_size, device)
    with torch.no_grad():
        if guide is None:
            loss = sr_criterion(sr_images, val_hr, spec).item()
        else:
            loss = merged_loss(
                sr_criterion(sr_images, val_hr, spec),
                classification_loss(
                    predict_logits(guide, sr_images, batch_size, device),
                    predict_logits(guide, val_hr, batch_size, device),
                ),
            ).item()
    return loss, image_quality(sr_images, val_hr)


def run_sr_pretrain(
    config: StageConfig,
    train_pairs: Sequence[PairedSample],
    val_pairs: Sequence[PairedSample],
    run_dir: Optional[Union[str, Path]] = None,
    device: str = "cpu",
    show_progress: bool = False
) -> Tuple[Checkpoint, TrainLog]:
    """SR-PT: train the SR model on the configured image-quality loss"""
    _require_stage(config, Stage.SR_PT)
    if not train_pairs:
        raise TrainingError("SR pretraining needs training pairs")
    seeds = seed_fanout(config.seed)
    model = initial_sr_model(config).to(device)
    spec = config.loss

    train_lr, train_hr, _ = _pair_tensors(train_pairs)
    val = _pair_tensors(val_pairs) if val_pairs else None
    log = TrainLog(
        _stage_header(config, len(train_pairs), len(val_pairs or [])),
        Path(run_dir) / TRAIN_LOG_NAME if run_dir else None
    )

    def step_fn(batch):
        lr_batch, hr_batch = batch[0].to(device), batch[1].to(device)
        model.train()
        return sr_criterion(sr_forward(model, lr_batch), hr_batch, spec)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seeds["shuffle"])
        best_epoch, best_state = _fit(
            model, list(model.parameters()), _loader((train_lr, train_hr), config.batch_size, seeds["shuffle"]),
            step_fn, lambda: _sr_validation(model, val, spec, config.batch_size, device),
            config, log, f"SR-PT {config.sr_model.family.value}/{spec.kind.value}", show_progress
        )

    if best_state is not None:
        load_parameters(model, best_state)
    log.log_event("selected", epoch=best_epoch, criterion="val_loss" if val else "train_loss")
    checkpoint = Checkpoint.from_sr_model(
        model.cpu(), Stage.SR_PT,
        metadata={"best_epoch": best_epoch, "loss": spec.kind.value, "steps": log.step_count}
    )
    _save_outputs(run_dir, checkpoint)
    return checkpoint, log


def _load_pretrained(path: Optional[str]) -> Checkpoint:
    """The SR-PT checkpoint a fine-tuning run must start from"""
    if not path:
        raise CheckpointError("SR-FT needs stage.init_checkpoint pointing at an SR-PT checkpoint")
    checkpoint = Checkpoint.load(path)
    if checkpoint.kind != "sr" or checkpoint.stage != Stage.SR_PT:
        found = checkpoint.stage.value if checkpoint.stage else checkpoint.kind
        raise CheckpointError(f"SR-FT must start from an SR-PT checkpoint, {path} is tagged {found}")
    return checkpoint


def compute_merged_loss(
    sr_batch: torch.Tensor,
    hr_batch: torch.Tensor,
    guide: ShipClassifier,
    spec: LossSpec,
    mode: str = "eval"
) -> LossValue:
    """sr_criterion(sr, hr) + MSE(guide(sr), guide(hr)); guide(hr) is a constant target

    In train mode both guide passes replay the same random state, so they
    share one dropout mask and identical SR and HR batches score zero.
    """
    cpu_state = torch.get_rng_state()
    cuda_states = torch.cuda.get_rng_state_all() if hr_batch.is_cuda else None
    with torch.no_grad():
        out_hr = classifier_forward(guide, hr_batch, mode)
    if mode == "train":
        torch.set_rng_state(cpu_state)
        if cuda_states is not None:
            torch.cuda.set_rng_state_all(cuda_states)
    out_sr = classifier_forward(guide, sr_batch, mode)
    return merged_loss(sr_criterion(sr_batch, hr_batch, spec), classification_loss(out_sr, out_hr))


def run_sr_finetune(
    config: StageConfig,
    train_pairs: Sequence[PairedSample],
    val_pairs: Sequence[PairedSample],
    guide_classifier: ShipClassifier,
    run_dir: Optional[Union[str, Path]] = None,
    device: str = "cpu",
    show_progress: bool = False
) -> Tuple[Checkpoint, TrainLog]:
    """SR-FT: fine-tune an SR-PT model on the merged loss"""
    _require_stage(config, Stage.SR_FT)
    if not train_pairs:
        raise TrainingError("SR fine-tuning needs training pairs")
    init = _load_pretrained(config.init_checkpoint)
    seeds = seed_fanout(config.seed)
    model = build_sr_model(config.sr_model, seeds["sr_init"])
    load_parameters(model, init.parameters)
    model.to(device)
    guide = guide_classifier.to(device)
    spec = config.loss

    joint = config.joint_update
    mode = "train" if joint else "eval"
    requires_grad = [p.requires_grad for p in guide.parameters()]
    trainable = list(model.parameters())
    if joint:
        trainable += list(guide.parameters())
    else:
        guide.eval()
        for p in guide.parameters():
            p.requires_grad_(False)

    train_lr, train_hr, _ = _pair_tensors(train_pairs)
    val = _pair_tensors(val_pairs) if val_pairs else None
    header = _stage_header(config, len(train_pairs), len(val_pairs or []))
    header.update(init_checkpoint=str(config.init_checkpoint), init_digest=init.digest(), joint_update=joint)
    log = TrainLog(header, Path(run_dir) / TRAIN_LOG_NAME if run_dir else None)

    def step_fn(batch):
        lr_batch, hr_batch = batch[0].to(device), batch[1].to(device)
        model.train()
        return compute_merged_loss(sr_forward(model, lr_batch), hr_batch, guide, spec, mode)

    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seeds["shuffle"])
            best_epoch, best_state = _fit(
                model, trainable, _loader((train_lr, train_hr), config.batch_size, seeds["shuffle"]),
                step_fn, lambda: _sr_validation(model, val, spec, config.batch_size, device, guide),
                config, log, f"SR-FT {config.sr_model.family.value}/{spec.kind.value}", show_progress
            )
    finally:
        for p, flag in zip(guide.parameters(), requires_grad):
            p.requires_grad_(flag)

    if best_state is not None:
        load_parameters(model, best_state)
    log.log_event("selected", epoch=best_epoch, criterion="val_loss" if val else "train_loss")
    checkpoint = Checkpoint.from_sr_model(
        model.cpu(), Stage.SR_FT,
        metadata={
            "best_epoch": best_epoch,
            "loss": spec.kind.value,
            "steps": log.step_count,
            "init_digest": init.digest(),
            "joint_update": joint,
        }
    )
    _save_outputs(run_dir, checkpoint)
    return checkpoint, log


def train_classifier(
    config: StageConfig,
    images: Sequence[LabeledSample],
    val: Sequence[LabeledSample],
    run_dir: Optional[Union[str, Path]] = None,
    device: str = "cpu",
    show_progress: bool = False,
    expected_lineage: Optional[str] = None
) -> Tuple[Checkpoint, MetricReport]:
    """Cross-entropy training of every classifier layer; final-epoch val report"""
    if not images or not val:
        raise TrainingError("Classifier training needs nonempty training and validation sets")
    counts = label_histogram(images)
    absent = [CLASS_NAMES[c] for c in range(NUM_CLASSES) if counts.get(c, 0) == 0]
    if absent:
        raise TrainingError(f"Classes absent from the training split: {', '.join(absent)}")
    if expected_lineage is not None:
        foreign = sorted({s.lineage for s in [*images, *val] if s.lineage != expected_lineage})
        if foreign:
            raise TrainingError(f"Expected only {expected_lineage} images, found lineage {foreign}")

    seeds = seed_fanout(config.seed)
    model = build_classifier(config.classifier, seeds["classifier_init"]).to(device)
    train_x, train_y = stack_images(images), stack_labels(images)
    val_x, val_y = stack_images(val), stack_labels(val)
    lineage = expected_lineage or images[0].lineage
    log = TrainLog(
        {**_stage_header(config, len(images), len(val)), "model": "classifier", "lineage": lineage},
        Path(run_dir) / TRAIN_LOG_NAME if run_dir else None
    )

    def step_fn(batch):
        x_batch, y_batch = batch[0].to(device), batch[1].to(device)
        loss = F.cross_entropy(classifier_forward(model, x_batch, "train"), y_batch)
        if not torch.isfinite(loss.detach()):
            raise NumericError(f"Cross-entropy is not finite: {loss.item()}")
        return LossValue(total=loss, components={"ce_loss": float(loss.detach().item())})

    def val_fn():
        logits = predict_logits(model, val_x, config.batch_size, device)
        loss = float(F.cross_entropy(logits, val_y).item())
        return loss, MetricReport.from_predictions(logits.argmax(dim=1), val_y)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seeds["shuffle"])
        _fit(
            model, list(model.parameters()), _loader((train_x, train_y), config.batch_size, seeds["shuffle"]),
            step_fn, val_fn, config, log, f"classifier {config.classifier.backbone.value}/{lineage}", show_progress
        )

    report = MetricReport(**log.epochs[-1]["val"])
    checkpoint = Checkpoint.from_classifier(
        model.cpu(), metadata={"lineage": lineage, "final_epoch": config.epochs, "macro_f1": report.macro_f1}
    )
    _save_outputs(run_dir, checkpoint)
    logger.info(f"Classifier {config.classifier.backbone.value} on {lineage}: macro-F1 {report.macro_f1:.4f}")
    return checkpoint, report


# Full protocol

@dataclass(frozen=True)
class GridCell:
    sr_family: SrFamily
    loss: LossKind
    classifier: Backbone

    @property
    def key(self) -> str:
        return f"{self.sr_family.value}-{self.loss.value}-{self.classifier.value}"


def protocol_cells(config: RunConfig) -> List[GridCell]:
    """Grid cells in report order: family, then loss, then classifier"""
    grid = config.grid
    return [GridCell(*combo) for combo in itertools.product(grid.sr_families, grid.losses, grid.classifiers)]


def cell_stage_config(config: RunConfig, cell: GridCell, stage: Stage,
                      init_checkpoint: Optional[str] = None) -> StageConfig:
    """Stage config of one grid cell, seeded independently of other cells"""
    base = config.stage
    return base.model_copy(update={
        "stage": stage,
        "loss": base.loss.model_copy(update={"kind": cell.loss}),
        "sr_model": base.sr_model.model_copy(update={"family": cell.sr_family}),
        "classifier": base.classifier.model_copy(update={"backbone": cell.classifier}),
        "seed": derive_seed(config.seed, cell.key),
        "init_checkpoint": init_checkpoint,
    })


def baseline_stage_config(config: RunConfig, backbone: Backbone) -> StageConfig:
    base = config.stage
    return base.model_copy(update={
        "classifier": base.classifier.model_copy(update={"backbone": backbone}),
        "seed": derive_seed(config.seed, f"baseline-{backbone.value}"),
        "init_checkpoint": None,
    })


def _row(kind: str, stage: str, classifier: Backbone, report: MetricReport,
         cell: Optional[GridCell] = None, error_score: Optional[float] = None,
         digest: Optional[str] = None) -> Dict:
    return {
        "kind": kind,
        "sr_family": cell.sr_family.value if cell else None,
        "loss": cell.loss.value if cell else None,
        "classifier": classifier.value,
        "stage": stage,
        "psnr": report.psnr_db,
        "ssim": report.ssim,
        "macro_f1": report.macro_f1,
        "per_class_f1": report.per_class_f1,
        "error_score": error_score,
        "status": "ok",
        "error": None,
        "checkpoint_digest": digest,
    }


def _failure_row(kind: str, classifier: Backbone, error: str, stage: Optional[str] = None,
                 cell: Optional[GridCell] = None) -> Dict:
    row = _row(kind, stage, classifier, MetricReport(), cell)
    row.update(status="failed", error=error)
    return row


def _evaluate_stage(config: RunConfig, stage_config: StageConfig, cell: GridCell,
                    sr_train: torch.Tensor, sr_test: torch.Tensor, quality: MetricReport,
                    train_pairs: Sequence[PairedSample], test_pairs: Sequence[PairedSample],
                    sr_checkpoint: Checkpoint, cell_dir: Path) -> Dict:
    """Train the stage's evaluation classifier on its SR outputs only, then score"""
    stage = sr_checkpoint.stage.value
    train_samples = relabel_images(sr_train, [p.label for p in train_pairs], lineage=stage)
    test_samples = relabel_images(sr_test, [p.label for p in test_pairs], lineage=stage)
    _, report = train_classifier(
        stage_config, train_samples, test_samples,
        run_dir=cell_dir / stage / "classifier", device=config.device,
        show_progress=config.show_progress, expected_lineage=stage
    )

    hr_test = stack_images(test_pairs, "hr")
    maps = [error_map(hr_test[i, 0], sr_test[i, 0]) for i in range(hr_test.shape[0])]
    for i, emap in enumerate(maps[:config.report.error_maps_per_cell]):
        emap.save(cell_dir / "error_maps" / f"{stage}_{i:03d}")

    combined = MetricReport(psnr_db=quality.psnr_db, ssim=quality.ssim,
                            per_class_f1=report.per_class_f1, macro_f1=report.macro_f1)
    return _row("cell", stage, cell.classifier, combined, cell,
                error_score=float(np.mean([m.score for m in maps])), digest=sr_checkpoint.digest())


def _super_resolve_pairs(model, pairs, config: StageConfig, device: str) -> Tuple[torch.Tensor, MetricReport]:
    lr_images, hr_images, _ = _pair_tensors(pairs)
    sr_images = super_resolve(model, lr_images, config.batch_size, device)
    return sr_images, image_quality(sr_images, hr_images)


def run_cell(config: RunConfig, cell: GridCell, train_pairs: Sequence[PairedSample],
             test_pairs: Sequence[PairedSample], guide: Checkpoint, cell_dir: Path,
             sr_pairs: Optional[Tuple[Sequence[PairedSample], Sequence[PairedSample]]] = None) -> List[Dict]:
    """SR-I, SR-PT and SR-FT rows of one grid cell

    sr_pairs is the (fit, val) partition of train_pairs the SR stages train and
    select on; the test pairs are only ever scored.
    """
    cell_dir = Path(cell_dir)
    fit_pairs, val_pairs = sr_pairs if sr_pairs is not None else validation_split(train_pairs, config.data.split)
    device = config.device
    rows = []
    logger.info(f"Running cell {cell.key}")

    si_config = cell_stage_config(config, cell, Stage.SR_I)
    si_model = initial_sr_model(si_config)
    si_checkpoint = Checkpoint.from_sr_model(si_model, Stage.SR_I)
    _save_outputs(cell_dir / Stage.SR_I.value, si_checkpoint)
    sr_train, _ = run_sr_inference(si_config, train_pairs, si_model, device)
    sr_test, quality = run_sr_inference(si_config, test_pairs, si_model, device)
    rows.append(_evaluate_stage(config, si_config, cell, sr_train, sr_test, quality,
                                train_pairs, test_pairs, si_checkpoint, cell_dir))

    pt_config = cell_stage_config(config, cell, Stage.SR_PT)
    pt_dir = cell_dir / Stage.SR_PT.value
    pt_checkpoint, _ = run_sr_pretrain(pt_config, fit_pairs, val_pairs, pt_dir, device, config.show_progress)
    pt_model = pt_checkpoint.build_model().to(device)
    sr_train, _ = _super_resolve_pairs(pt_model, train_pairs, pt_config, device)
    sr_test, quality = _super_resolve_pairs(pt_model, test_pairs, pt_config, device)
    rows.append(_evaluate_stage(config, pt_config, cell, sr_train, sr_test, quality,
                                train_pairs, test_pairs, pt_checkpoint, cell_dir))

    ft_config = cell_stage_config(config, cell, Stage.SR_FT, init_checkpoint=str(pt_dir / CHECKPOINT_NAME))
    ft_checkpoint, _ = run_sr_finetune(
        ft_config, fit_pairs, val_pairs, guide.build_model(),
        cell_dir / Stage.SR_FT.value, device, config.show_progress
    )
    ft_model = ft_checkpoint.build_model().to(device)
    sr_train, _ = _super_resolve_pairs(ft_model, train_pairs, ft_config, device)
    sr_test, quality = _super_resolve_pairs(ft_model, test_pairs, ft_config, device)
    rows.append(_evaluate_stage(config, ft_config, cell, sr_train, sr_test, quality,
                                train_pairs, test_pairs, ft_checkpoint, cell_dir))
    return rows


def _cell_job(config: RunConfig, cell: GridCell, train_pairs, test_pairs, guide: Checkpoint,
              cell_dir: str, sr_pairs=None) -> List[Dict]:
    """Worker entry point: failures become a failure row"""
    try:
        return run_cell(config, cell, train_pairs, test_pairs, guide, Path(cell_dir), sr_pairs)
    except Exception as e:
        logger.error(f"Cell {cell.key} failed: {e}")
        return [_failure_row("cell", cell.classifier, f"{type(e).__name__}: {e}", cell=cell)]


def _run_baselines(config: RunConfig, backbone: Backbone, train: Sequence[LabeledSample],
                   test: Sequence[LabeledSample], train_pairs: Sequence[PairedSample],
                   test_pairs: Sequence[PairedSample], run_dir: Path,
                   cache: ResultCache) -> Tuple[List[Dict], Checkpoint]:
    """HR and bicubic-LR classifier rows; the HR classifier is the SR-FT guide"""
    stage_config = baseline_stage_config(config, backbone)
    rows = []

    hr_key = f"baseline-HR-{backbone.value}"
    hr_dir = run_dir / "baselines" / f"HR-{backbone.value}"
    cached = cache.get(hr_key)
    if cached is not None and (hr_dir / CHECKPOINT_NAME).exists():
        logger.info(f"Reusing cached {hr_key}")
        rows.append(cached)
        guide = Checkpoint.load(hr_dir / CHECKPOINT_NAME)
    else:
        guide, report = train_classifier(
            stage_config, train, test, run_dir=hr_dir, device=config.device,
            show_progress=config.show_progress, expected_lineage="HR"
        )
        row = _row("baseline", "HR", backbone, report, digest=guide.digest())
        cache.set(hr_key, row)
        rows.append(row)

    lr_key = f"baseline-LR-{backbone.value}"
    cached = cache.get(lr_key)
    if cached is not None:
        rows.append(cached)
    else:
        lineage = "LR-bicubic"
        up_train = upsample_bicubic(stack_images(train_pairs, "lr"))
        up_test = upsample_bicubic(stack_images(test_pairs, "lr"))
        quality = image_quality(up_test, stack_images(test_pairs, "hr"))
        checkpoint, report = train_classifier(
            stage_config,
            relabel_images(up_train, [p.label for p in train_pairs], lineage),
            relabel_images(up_test, [p.label for p in test_pairs], lineage),
            run_dir=run_dir / "baselines" / f"LR-{backbone.value}", device=config.device,
            show_progress=config.show_progress, expected_lineage=lineage
        )
        combined = MetricReport(psnr_db=quality.psnr_db, ssim=quality.ssim,
                                per_class_f1=report.per_class_f1, macro_f1=report.macro_f1)
        row = _row("baseline", "LR", backbone, combined, digest=checkpoint.digest())
        cache.set(lr_key, row)
        rows.append(row)
    return rows, guide


def _srhr_row(rows: Sequence[Dict], backbone: Backbone) -> Optional[Dict]:
    """SRHR baseline: SR-I outputs averaged over every family and loss"""
    sr_i = [r for r in rows if r["kind"] == "cell" and r["stage"] == Stage.SR_I.value
            and r["classifier"] == backbone.value and r["status"] == "ok"]
    if not sr_i:
        return None
    row = _row("baseline", "SRHR", backbone, MetricReport(
        psnr_db=float(np.mean([r["psnr"] for r in sr_i])),
        ssim=float(np.mean([r["ssim"] for r in sr_i])),
        macro_f1=float(np.mean([r["macro_f1"] for r in sr_i])),
    ), error_score=float(np.mean([r["error_score"] for r in sr_i])))
    return row


def protocol_seeds(config: RunConfig) -> Dict[str, Optional[int]]:
    """Model sub-seeds of the master seed plus the data and split seeds actually used"""
    synthetic = config.data.synthetic
    return {
        **seed_fanout(config.seed, STAGE_SEED_NAMES),
        "data": synthetic.seed if synthetic is not None else None,
        "split": config.data.split.seed,
    }


def dataset_digest(samples: Sequence[LabeledSample]) -> str:
    digest = hashlib.sha256()
    for sample in samples:
        digest.update(str(sample.label).encode())
        digest.update(sample.image.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def run_full_protocol(
    base_config: RunConfig,
    dataset: Sequence[LabeledSample],
    run_dir: Optional[Union[str, Path]] = None,
    cache: Optional[ResultCache] = None
) -> ProtocolReport:
    """Baselines plus SR-I -> SR-PT -> SR-FT for every grid cell"""
    config = base_config
    run_dir = Path(run_dir) if run_dir else run_directory(config, "protocol")
    cache = cache or ResultCache(run_dir / "cache")
    started_at = datetime.now(timezone.utc).isoformat()

    train, test = split(dataset, config.data.split)
    train_pairs, test_pairs = make_pairs(train), make_pairs(test)
    fit, val = validation_split(train, config.data.split)
    sr_pairs = (make_pairs(fit), make_pairs(val))
    logger.info(f"Protocol on {len(train)} train ({len(val)} held out for SR selection) / {len(test)} test samples in {run_dir}")

    rows: List[Dict] = []
    guides: Dict[Backbone, Optional[Checkpoint]] = {}
    for backbone in config.grid.classifiers:
        try:
            baseline_rows, guides[backbone] = _run_baselines(
                config, backbone, train, test, train_pairs, test_pairs, run_dir, cache
            )
            rows.extend(baseline_rows)
        except Exception as e:
            logger.error(f"Baselines for {backbone.value} failed: {e}")
            guides[backbone] = None
            for stage in ("HR", "LR"):
                rows.append(_failure_row("baseline", backbone, f"{type(e).__name__}: {e}", stage=stage))

    cells = protocol_cells(config)
    results: Dict[str, List[Dict]] = {}
    pending = []
    for cell in cells:
        cached = cache.get(f"cell-{cell.key}")
        if cached is not None:
            logger.info(f"Skipping finished cell {cell.key}")
            results[cell.key] = cached
        elif guides.get(cell.classifier) is None:
            results[cell.key] = [_failure_row("cell", cell.classifier, "guide classifier unavailable", cell=cell)]
        else:
            pending.append(cell)

    def collect(cell: GridCell, cell_rows: List[Dict]) -> None:
        results[cell.key] = cell_rows
        if all(r["status"] == "ok" for r in cell_rows):
            cache.set(f"cell-{cell.key}", cell_rows)

    if config.workers > 1 and len(pending) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=config.workers) as executor:
            futures = {
                executor.submit(
                    _cell_job, config, cell, train_pairs, test_pairs,
                    guides[cell.classifier], str(run_dir / "cells" / cell.key), sr_pairs
                ): cell
                for cell in pending
            }
            for future in concurrent.futures.as_completed(futures):
                cell = futures[future]
                try:
                    collect(cell, future.result())
                except Exception as e:
                    logger.error(f"Worker for cell {cell.key} failed: {e}")
                    collect(cell, [_failure_row("cell", cell.classifier, f"{type(e).__name__}: {e}", cell=cell)])
    else:
        for cell in pending:
            collect(cell, _cell_job(config, cell, train_pairs, test_pairs,
                                    guides[cell.classifier], str(run_dir / "cells" / cell.key), sr_pairs))

    for cell in cells:
        rows.extend(results[cell.key])
    for backbone in config.grid.classifiers:
        srhr = _srhr_row(rows, backbone)
        if srhr is not None:
            rows.append(srhr)

    metadata = {
        "config_digest": config.digest(),
        "resolved_config": config.resolved(),
        "seed": config.seed,
        "seeds": protocol_seeds(config),
        "dataset_digest": dataset_digest(dataset),
        "split": {"train": len(train), "val": len(val), "test": len(test)},
        "cells": [cell.key for cell in cells],
        "deviations": [SR_I_DEVIATION, SRHR_NOTE],
        "cache": cache.get_stats(),
        "started_at": started_at,
        "finished_at": datetime.now(timezone.utc).isoformat(),
    }
    report = ProtocolReport(rows=rows, metadata=metadata)
    logger.info(f"Protocol finished: {len(rows)} rows, {len(report.failures())} failures")
    return report
