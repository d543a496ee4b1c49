#!/usr/bin/env python3
"""
Models - Lite super-resolution networks, ship classifier, parameter snapshots

The three SR families share one input/output contract (1x32x32 -> 1x64x64)
and differ only in their feature trunk:

    EDSR_LITE  plain residual blocks
    CARN_LITE  residual blocks joined by cascading 1x1 fusion convolutions
    RCAN_LITE  residual blocks with per-channel attention

All of them learn a residual on top of a bicubic 2x upsampling and use a
sub-pixel (depth-to-space) upsampler. Outputs are clamped to [0, 1].
"""

import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision import models as tv_models

from .config import Backbone, ClassifierConfig, SrFamily, SrModelConfig, Stage
from .exceptions import CheckpointError, ConfigurationError, NumericError, ShapeError
from .metrics import DEFAULT_PEAK, NUM_CLASSES

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

# weight name -> tensor, in state_dict order
ParameterSnapshot = Dict[str, torch.Tensor]


# Building blocks

class ResidualBlock(nn.Module):
    """conv-ReLU-conv with identity skip"""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation style per-channel reweighting"""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.gate = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, hidden, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, kernel_size=1),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


class AttentionResidualBlock(nn.Module):
    """Residual block whose branch ends in channel attention"""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
        )
        self.attention = ChannelAttention(channels, reduction)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.attention(self.body(x))


class SuperResolutionNet(nn.Module):
    """2x single-channel SR network of the configured family"""

    def __init__(self, config: SrModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        channels, blocks = config.channels, config.blocks

        self.head = nn.Conv2d(1, channels, kernel_size=3, padding=1)
        if config.family == SrFamily.RCAN_LITE:
            self.body = nn.ModuleList(
                AttentionResidualBlock(channels, config.attention_reduction) for _ in range(blocks)
            )
        else:
            self.body = nn.ModuleList(ResidualBlock(channels) for _ in range(blocks))

        # block i fuses the head output and the outputs of blocks 0..i
        self.fusion = None
        if config.family == SrFamily.CARN_LITE:
            self.fusion = nn.ModuleList(
                nn.Sequential(nn.Conv2d((i + 2) * channels, channels, kernel_size=1), nn.ReLU(inplace=True))
                for i in range(blocks)
            )

        self.body_tail = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.upsampler = nn.Sequential(
            nn.Conv2d(channels, channels * config.scale ** 2, kernel_size=3, padding=1),
            nn.PixelShuffle(config.scale),
        )
        self.tail = nn.Conv2d(channels, 1, kernel_size=3, padding=1)

        if config.identity_init:
            nn.init.zeros_(self.tail.weight)
            nn.init.zeros_(self.tail.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        base = F.interpolate(x, scale_factor=self.config.scale, mode="bicubic", align_corners=False)
        features = self.head(x)

        out = features
        if self.fusion is not None:
            cascade = features
            for block, fuse in zip(self.body, self.fusion):
                cascade = torch.cat([cascade, block(out)], dim=1)
                out = fuse(cascade)
        else:
            for block in self.body:
                out = block(out)

        out = self.body_tail(out) + features
        residual = self.tail(self.upsampler(out))
        return (base + residual).clamp(0.0, DEFAULT_PEAK)


class SmallCnn(nn.Module):
    """Three conv/pool stages, as in small SAR ATR networks"""
    out_features = 64 * 4 * 4

    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 16, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(kernel_size=2, stride=2),
            nn.Conv2d(16, 32, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(kernel_size=2, stride=2),
            nn.Conv2d(32, 64, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(kernel_size=2, stride=2),
            nn.AdaptiveAvgPool2d(4),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.features(x), 1)


# torchvision backbones: constructor, attribute holding the original head, feature width
TORCHVISION_BACKBONES = {
    Backbone.RESNET18: (tv_models.resnet18, "fc", 512),
    Backbone.RESNET50: (tv_models.resnet50, "fc", 2048),
    Backbone.VGG16: (tv_models.vgg16, "classifier", 512 * 7 * 7),
    Backbone.MOBILENET_V2: (tv_models.mobilenet_v2, "classifier", 1280),
    Backbone.DENSENET121: (tv_models.densenet121, "classifier", 1024),
}


class ShipClassifier(nn.Module):
    """Backbone followed by linear->hidden, ReLU, dropout, linear->6"""

    def __init__(self, config: ClassifierConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed

        if config.backbone == Backbone.SMALL_CNN:
            self.backbone = SmallCnn()
            self.in_channels = 1
            features = SmallCnn.out_features
        elif config.backbone in TORCHVISION_BACKBONES:
            factory, head_attr, features = TORCHVISION_BACKBONES[config.backbone]
            self.backbone = factory(weights=None)
            setattr(self.backbone, head_attr, nn.Identity())
            self.in_channels = 3
        else:
            raise ConfigurationError(f"Unknown classifier backbone: {config.backbone}")

        self.head = nn.Sequential(
            nn.Linear(features, config.head_hidden),
            nn.ReLU(inplace=True),
            nn.Dropout(p=config.head_dropout),
            nn.Linear(config.head_hidden, config.num_classes),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.in_channels != x.shape[1]:
            # grayscale replicated across the backbone's input channels
            x = x.expand(-1, self.in_channels, -1, -1)
        return self.head(torch.flatten(self.backbone(x), 1))


# Construction and forward passes

def build_sr_model(config: SrModelConfig, seed: int) -> SuperResolutionNet:
    """Deterministically initialized SR network"""
    if not isinstance(config, SrModelConfig):
        raise ConfigurationError(f"Expected SrModelConfig, got {type(config).__name__}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SuperResolutionNet(config, seed)
    logger.debug(f"Built {config.family.value} with {count_parameters(model)} parameters (seed {seed})")
    return model


def build_classifier(config: ClassifierConfig, seed: int) -> ShipClassifier:
    """Deterministically initialized classifier, all layers trainable"""
    if not isinstance(config, ClassifierConfig):
        raise ConfigurationError(f"Expected ClassifierConfig, got {type(config).__name__}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ShipClassifier(config, seed)
    logger.debug(f"Built {config.backbone.value} classifier with {count_parameters(model)} parameters")
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _check_image_batch(batch: torch.Tensor, what: str) -> None:
    if batch.dim() != 4 or batch.shape[1] != 1:
        raise ShapeError(f"{what} must be shaped (N, 1, H, W), got {tuple(batch.shape)}")


def sr_forward(model: SuperResolutionNet, lr_batch: torch.Tensor) -> torch.Tensor:
    """Super-resolve a batch of LR images; output is scale x larger"""
    _check_image_batch(lr_batch, "LR batch")
    sr_batch = model(lr_batch)
    if not torch.isfinite(sr_batch.detach()).all():
        raise NumericError("Non-finite SR activations")
    return sr_batch


def classifier_forward(model: ShipClassifier, batch: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    """Logits (N, 6); dropout active only in train mode"""
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    _check_image_batch(batch, "Classifier batch")
    size = model.config.input_size
    if batch.shape[-2:] != (size, size):
        raise ShapeError(f"Classifier expects {size}x{size} images, got {tuple(batch.shape[-2:])}")
    model.train(mode == "train")
    logits = model(batch)
    if logits.shape[-1] != NUM_CLASSES:
        raise ShapeError(f"Expected {NUM_CLASSES} logits, got {logits.shape[-1]}")
    return logits


# Snapshots and checkpoints

def parameters(model: nn.Module) -> ParameterSnapshot:
    """Detached copy of every weight, keyed by name"""
    return OrderedDict((name, tensor.detach().clone()) for name, tensor in model.state_dict().items())


def load_parameters(model: nn.Module, snapshot: ParameterSnapshot) -> None:
    """Load a snapshot whose names and shapes match the model topology"""
    own = model.state_dict()
    missing = sorted(set(own) - set(snapshot))
    unexpected = sorted(set(snapshot) - set(own))
    mismatched = sorted(
        name for name in set(own) & set(snapshot) if tuple(own[name].shape) != tuple(snapshot[name].shape)
    )
    if missing or unexpected or mismatched:
        raise CheckpointError(
            f"Snapshot does not fit the model: missing={missing[:5]}, "
            f"unexpected={unexpected[:5]}, shape mismatch={mismatched[:5]}"
        )
    model.load_state_dict(snapshot, strict=True)


def snapshot_digest(snapshot: ParameterSnapshot) -> str:
    """sha256 over names, shapes, dtypes and raw bytes"""
    digest = hashlib.sha256()
    for name in sorted(snapshot):
        tensor = snapshot[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


@dataclass
class Checkpoint:
    """Self-describing container: config, seed, weights and stage provenance"""
    kind: str
    config: Dict[str, Any]
    seed: int
    parameters: ParameterSnapshot
    stage: Optional[Stage] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_sr_model(cls, model: SuperResolutionNet, stage: Stage, metadata: Optional[Dict] = None) -> "Checkpoint":
        return cls(
            kind="sr",
            config=model.config.model_dump(mode="json"),
            seed=model.seed,
            parameters=parameters(model),
            stage=stage,
            metadata=dict(metadata or {}),
        )

    @classmethod
    def from_classifier(cls, model: ShipClassifier, metadata: Optional[Dict] = None) -> "Checkpoint":
        return cls(
            kind="classifier",
            config=model.config.model_dump(mode="json"),
            seed=model.seed,
            parameters=parameters(model),
            metadata=dict(metadata or {}),
        )

    def digest(self) -> str:
        return snapshot_digest(self.parameters)

    def build_model(self) -> Union[SuperResolutionNet, ShipClassifier]:
        """Rebuild the model topology and load the stored weights"""
        if self.kind == "sr":
            model = build_sr_model(SrModelConfig.model_validate(self.config), self.seed)
        elif self.kind == "classifier":
            model = build_classifier(ClassifierConfig.model_validate(self.config), self.seed)
        else:
            raise CheckpointError(f"Unknown checkpoint kind: {self.kind}")
        load_parameters(model, self.parameters)
        return model

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format_version": CHECKPOINT_FORMAT_VERSION,
                "kind": self.kind,
                "stage": self.stage.value if self.stage else None,
                "config": self.config,
                "seed": self.seed,
                "parameters": OrderedDict(self.parameters),
                "metadata": self.metadata,
            },
            path,
        )
        logger.info(f"Saved {self.kind} checkpoint ({self.stage.value if self.stage else 'no stage'}) to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"Checkpoint not found: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as e:
            raise CheckpointError(f"Unreadable checkpoint {path}: {e}") from e

        version = payload.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint format {version} in {path}")
        try:
            return cls(
                kind=payload["kind"],
                config=payload["config"],
                seed=payload["seed"],
                parameters=payload["parameters"],
                stage=Stage(payload["stage"]) if payload["stage"] else None,
                metadata=payload.get("metadata", {}),
            )
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"Malformed checkpoint {path}: {e}") from e
