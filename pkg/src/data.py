#!/usr/bin/env python3
"""
Dataset Handling - Ingestion, LR synthesis, synthetic SAR ships, splits

Directory layout read and written by this module:

    <root>/<ClassName>/*.png      8-bit grayscale, one folder per class
    <root>/manifest.json          written by export_dataset

Images are float32 tensors in [0, 1] of shape (H, W).
"""

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageOps, UnidentifiedImageError

from .config import SplitSpec
from .exceptions import ConfigurationError, DomainError, IngestionError, ShapeError, SplitError
from .metrics import CLASS_NAMES, DEFAULT_PEAK, NUM_CLASSES
from .utils import derive_seed

logger = logging.getLogger(__name__)

GENERATOR_VERSION = "1"
HR_SIZE = 64
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}

# intensity levels of the noise-free scene
SEA_LEVEL = 0.06
WAKE_LEVEL = 0.15
HULL_LEVEL = 0.35
SUPERSTRUCTURE_LEVEL = 0.5


@dataclass
class LabeledSample:
    """HR image with its class label and the origin of its pixels"""
    image: torch.Tensor
    label: int
    source: str = ""
    lineage: str = "HR"

    def __post_init__(self):
        if not 0 <= int(self.label) < NUM_CLASSES:
            raise DomainError(f"Label {self.label} outside 0..{NUM_CLASSES - 1}")
        if self.image.dim() != 2:
            raise ShapeError(f"Sample image must be (H, W), got {tuple(self.image.shape)}")

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.label]


@dataclass
class PairedSample:
    """LR/HR pair; lr is downsample(hr, 2)"""
    lr: torch.Tensor
    hr: torch.Tensor
    label: int
    source: str = ""


@dataclass(frozen=True)
class ShipGeometry:
    """Noise-free silhouette parameters of one ship class (pixels at 64x64)"""
    length: float
    beam: float
    # (center, length) of each superstructure, as fractions of hull length
    superstructures: Tuple[Tuple[float, float], ...]
    wake: bool


SHIP_GEOMETRY: Dict[int, ShipGeometry] = {
    0: ShipGeometry(length=36.0, beam=8.0, superstructures=((-0.38, 0.12),), wake=False),       # Cargo
    1: ShipGeometry(length=44.0, beam=12.0, superstructures=((-0.40, 0.10),), wake=False),      # Tanker
    2: ShipGeometry(length=18.0, beam=6.0, superstructures=((0.10, 0.25),), wake=True),         # Fishing
    3: ShipGeometry(length=30.0, beam=11.0, superstructures=((-0.30, 0.12), (0.0, 0.12), (0.30, 0.12)), wake=False),  # Dredging
    4: ShipGeometry(length=38.0, beam=9.0, superstructures=((-0.05, 0.65),), wake=False),       # Passenger
    5: ShipGeometry(length=14.0, beam=7.0, superstructures=((0.15, 0.30),), wake=True),         # Tug
}


# Resampling

def downsample(hr: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Antialiased bicubic reduction by `factor`, clamped to [0, 1]

    Accepts (H, W) or (N, 1, H, W) and returns the same rank.
    """
    if factor != 2:
        raise ConfigurationError(f"Only 2x downsampling is supported, got factor {factor}")
    single = hr.dim() == 2
    batch = hr.unsqueeze(0).unsqueeze(0) if single else hr
    if batch.dim() != 4:
        raise ShapeError(f"Expected (H, W) or (N, 1, H, W), got {tuple(hr.shape)}")

    height, width = batch.shape[-2:]
    if height % factor or width % factor:
        raise ShapeError(f"Image {height}x{width} is not divisible by {factor}")

    low = F.interpolate(
        batch,
        size=(height // factor, width // factor),
        mode="bicubic",
        align_corners=False,
        antialias=True,
    ).clamp(0.0, DEFAULT_PEAK)
    return low[0, 0] if single else low


def upsample_bicubic(lr: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Plain bicubic enlargement, the LR baseline"""
    single = lr.dim() == 2
    batch = lr.unsqueeze(0).unsqueeze(0) if single else lr
    high = F.interpolate(batch, scale_factor=factor, mode="bicubic", align_corners=False).clamp(0.0, DEFAULT_PEAK)
    return high[0, 0] if single else high


# Ingestion

def _read_image(path: Path, expected_size: int) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            gray = ImageOps.fit(img.convert("L"), (expected_size, expected_size), method=Image.BICUBIC)
    except (UnidentifiedImageError, OSError) as e:
        raise IngestionError(f"Unreadable image {path}: {e}") from e
    return torch.from_numpy(np.asarray(gray, dtype=np.float32) / 255.0)


def load_dataset(
    root: Union[str, Path],
    expected_size: int = HR_SIZE,
    warnings: Optional[List[str]] = None
) -> List[LabeledSample]:
    """Read a <root>/<ClassName>/ tree into samples ordered by path"""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"Dataset root is not a directory: {root}")

    missing = [name for name in CLASS_NAMES if not (root / name).is_dir()]
    if missing:
        raise IngestionError(f"Missing class directories under {root}: {', '.join(missing)}")

    extra = sorted(p.name for p in root.iterdir() if p.is_dir() and p.name not in CLASS_NAMES)
    if extra:
        logger.warning(f"Ignoring unknown directories under {root}: {extra}")

    samples = []
    for label, name in enumerate(CLASS_NAMES):
        files = sorted(p for p in (root / name).iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            message = f"Class directory {root / name} holds no images"
            logger.warning(message)
            if warnings is not None:
                warnings.append(message)
        for path in files:
            samples.append(LabeledSample(image=_read_image(path, expected_size), label=label, source=str(path)))

    samples.sort(key=lambda s: s.source)
    logger.info(f"Loaded {len(samples)} images from {root}: {dict(label_histogram(samples))}")
    return samples


# Synthetic generator

def render_template(
    label: int,
    angle: float = 0.0,
    offset: Tuple[float, float] = (0.0, 0.0),
    scale: float = 1.0,
    size: int = HR_SIZE
) -> np.ndarray:
    """Noise-free scene: sea, hull, superstructures and optional wake"""
    geometry = SHIP_GEOMETRY[label]
    length, beam = geometry.length * scale, geometry.beam * scale

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    center = (size - 1) / 2.0
    dx = xx - center - offset[0]
    dy = yy - center - offset[1]
    # ship frame: u along the hull (bow at +u), v across it
    u = dx * math.cos(angle) + dy * math.sin(angle)
    v = -dx * math.sin(angle) + dy * math.cos(angle)

    half_length, half_beam = length / 2.0, beam / 2.0
    bow_start = half_length - beam
    # full beam aft of the bow section, tapering linearly to a point at the bow
    width = np.where(u <= bow_start, half_beam, half_beam * (half_length - u) / max(beam, 1e-6))
    hull = (np.abs(u) <= half_length) & (np.abs(v) <= width)

    scene = np.full((size, size), SEA_LEVEL, dtype=np.float64)
    if geometry.wake:
        behind = -u - half_length
        wake = (behind > 0) & (behind < length) & (np.abs(v) <= half_beam + 0.35 * behind)
        scene[wake] = WAKE_LEVEL
    scene[hull] = HULL_LEVEL

    for position, extent in geometry.superstructures:
        block = (np.abs(u - position * length) <= extent * length / 2.0) & (np.abs(v) <= 0.3 * beam)
        scene[block & hull] = SUPERSTRUCTURE_LEVEL
    return scene


def apply_speckle(template: np.ndarray, looks: int, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative unit-mean gamma speckle, clipped to [0, 1]"""
    if looks < 1:
        raise DomainError(f"speckle_looks must be >= 1, got {looks}")
    speckle = rng.gamma(shape=looks, scale=1.0 / looks, size=template.shape)
    return np.clip(template * speckle, 0.0, 1.0)


def generate_synthetic(n_per_class: int, seed: int, speckle_looks: int = 4) -> List[LabeledSample]:
    """SAR-like ship chips, n_per_class of each label, ordered by label"""
    if n_per_class < 1:
        raise DomainError(f"n_per_class must be >= 1, got {n_per_class}")
    if speckle_looks < 1:
        raise DomainError(f"speckle_looks must be >= 1, got {speckle_looks}")

    samples = []
    for label in range(NUM_CLASSES):
        for i in range(n_per_class):
            index = label * n_per_class + i
            rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
            angle = rng.uniform(0.0, 2.0 * math.pi)
            offset = tuple(rng.integers(-4, 5, size=2).astype(np.float64))
            scale = rng.uniform(0.9, 1.1)
            scene = apply_speckle(render_template(label, angle, offset, scale), speckle_looks, rng)
            samples.append(LabeledSample(
                image=torch.from_numpy(scene.astype(np.float32)),
                label=label,
                source=f"synthetic:{seed}:{index}",
            ))

    logger.info(f"Generated {len(samples)} synthetic samples (seed {seed}, looks {speckle_looks})")
    return samples


def export_dataset(
    samples: Sequence[LabeledSample],
    out_dir: Union[str, Path],
    manifest: Optional[Dict] = None
) -> Path:
    """Write samples as <out_dir>/<ClassName>/*.png plus manifest.json"""
    out_dir = Path(out_dir)
    per_class: Counter = Counter()
    for name in CLASS_NAMES:
        (out_dir / name).mkdir(parents=True, exist_ok=True)

    for sample in samples:
        name = sample.class_name
        pixels = np.round(sample.image.detach().cpu().numpy() * 255.0).clip(0, 255).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(out_dir / name / f"{name}_{per_class[name]:04d}.png")
        per_class[name] += 1

    document = {
        "generator_version": GENERATOR_VERSION,
        **(manifest or {}),
        "counts": {name: per_class[name] for name in CLASS_NAMES},
        "total": sum(per_class.values()),
    }
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, 'w') as f:
        json.dump(document, f, indent=2, sort_keys=True)
    logger.info(f"Exported {document['total']} images to {out_dir}")
    return manifest_path


# Splits and pairs

def label_histogram(samples: Sequence) -> Counter:
    return Counter(int(s.label) for s in samples)


def _train_count(n: int, fraction: float) -> int:
    return min(max(int(math.floor(fraction * n + 0.5)), 1), n - 1)


def split(samples: Sequence[LabeledSample], spec: SplitSpec) -> Tuple[List, List]:
    """Disjoint, exhaustive train/test split, stratified per class by default"""
    rng = np.random.default_rng(spec.seed)
    train_idx: List[int] = []

    if spec.stratified:
        counts = label_histogram(samples)
        short = [CLASS_NAMES[label] for label in range(NUM_CLASSES) if counts.get(label, 0) < 2]
        if short:
            raise SplitError(f"Stratified split needs >= 2 samples per class; too few in: {', '.join(short)}")
        for label in range(NUM_CLASSES):
            members = np.array([i for i, s in enumerate(samples) if s.label == label])
            chosen = rng.permutation(members)[:_train_count(len(members), spec.train_fraction)]
            train_idx.extend(int(i) for i in chosen)
    else:
        if len(samples) < 2:
            raise SplitError(f"Cannot split {len(samples)} samples")
        order = rng.permutation(len(samples))
        train_idx = [int(i) for i in order[:_train_count(len(samples), spec.train_fraction)]]

    in_train = set(train_idx)
    train = [s for i, s in enumerate(samples) if i in in_train]
    test = [s for i, s in enumerate(samples) if i not in in_train]
    logger.debug(f"Split {len(samples)} samples into {len(train)} train / {len(test)} test")
    return train, test


def validation_split(train: Sequence, spec: SplitSpec) -> Tuple[List, List]:
    """Hold val_fraction of a train split out for checkpoint selection; returns (fit, val)"""
    holdout = SplitSpec(
        train_fraction=1.0 - spec.val_fraction,
        seed=derive_seed(spec.seed, "val"),
        stratified=spec.stratified,
    )
    return split(train, holdout)


def make_pairs(samples: Sequence[LabeledSample]) -> List[PairedSample]:
    """Attach the 2x-downsampled LR image to every HR sample"""
    return [
        PairedSample(lr=downsample(s.image, 2), hr=s.image, label=int(s.label), source=s.source)
        for s in samples
    ]


def stack_images(items: Sequence, attr: str = "image") -> torch.Tensor:
    """(N, 1, H, W) batch from one image attribute of each item"""
    if not items:
        raise DomainError("Cannot stack an empty sample sequence")
    return torch.stack([getattr(item, attr) for item in items]).unsqueeze(1)


def stack_labels(items: Sequence) -> torch.Tensor:
    return torch.tensor([int(item.label) for item in items], dtype=torch.long)


def relabel_images(images: torch.Tensor, labels: Sequence[int], lineage: str, sources: Optional[Sequence[str]] = None) -> List[LabeledSample]:
    """Wrap a (N, 1, H, W) batch as samples tagged with their lineage"""
    sources = sources or [""] * len(labels)
    return [
        LabeledSample(image=images[i, 0].detach().clone(), label=int(labels[i]), source=sources[i], lineage=lineage)
        for i in range(images.shape[0])
    ]
