#!/usr/bin/env python3
"""
Image Quality & Classification Metrics - PSNR, SSIM, confusion matrix, F1

Images are torch tensors with intensities in [0, peak]. A single image may be
given as (H, W); batches as (N, H, W) or (N, 1, H, W). Batch metrics are
computed per image pair and then averaged. All image metrics are
differentiable with respect to their inputs.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import confusion_matrix as sk_confusion_matrix

from .exceptions import ConfigurationError, DomainError, NumericError, ShapeError

logger = logging.getLogger(__name__)

NUM_CLASSES = 6
CLASS_NAMES = ("Cargo", "Tanker", "Fishing", "Dredging", "Passenger", "Tug")

DEFAULT_PEAK = 1.0
DEFAULT_EPSILON = 1e-8

SSIM_WINDOW_SIZE = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MIN_SSIM_SIZE = 8


@dataclass
class MetricReport:
    """Evaluation quantities for one evaluated configuration"""
    psnr_db: Optional[float] = None
    ssim: Optional[float] = None
    per_class_f1: Optional[List[float]] = None
    macro_f1: Optional[float] = None
    confusion: Optional[List[List[int]]] = None

    @classmethod
    def from_predictions(
        cls,
        predictions: Sequence[int],
        truths: Sequence[int],
        psnr_db: Optional[float] = None,
        ssim: Optional[float] = None
    ) -> "MetricReport":
        """Build a report from raw label lists"""
        grid = confusion_matrix(predictions, truths)
        per_class, macro = f1_scores(grid)
        return cls(
            psnr_db=psnr_db,
            ssim=ssim,
            per_class_f1=per_class,
            macro_f1=macro,
            confusion=grid.tolist()
        )

    def to_dict(self) -> Dict:
        return asdict(self)


def as_batch(images: torch.Tensor) -> torch.Tensor:
    """View an image or image batch as (N, 1, H, W)"""
    if images.dim() == 2:
        return images.unsqueeze(0).unsqueeze(0)
    if images.dim() == 3:
        return images.unsqueeze(1)
    if images.dim() == 4:
        if images.shape[1] != 1:
            raise ShapeError(f"Expected single-channel images, got {images.shape[1]} channels")
        return images
    raise ShapeError(f"Expected an image or image batch, got shape {tuple(images.shape)}")


def _validate_pair(a: torch.Tensor, b: torch.Tensor, peak: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """Check shapes, finiteness and the [0, peak] intensity convention"""
    if peak <= 0:
        raise DomainError(f"Peak intensity must be positive, got {peak}")
    if a.shape != b.shape:
        raise ShapeError(f"Image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    a, b = as_batch(a), as_batch(b)
    if a.numel() == 0:
        raise DomainError("Empty image batch")

    with torch.no_grad():
        if not (torch.isfinite(a).all() and torch.isfinite(b).all()):
            raise NumericError("Non-finite intensities")
        tolerance = peak * 1e-6
        low = min(a.min().item(), b.min().item())
        high = max(a.max().item(), b.max().item())
        if low < -tolerance or high > peak + tolerance:
            raise ConfigurationError(
                f"Intensities [{low:.6g}, {high:.6g}] fall outside [0, {peak}]"
            )
    return a, b


def per_image_mse(a: torch.Tensor, b: torch.Tensor, peak: float = DEFAULT_PEAK) -> torch.Tensor:
    """Mean squared error of every image pair, shape (N,)"""
    a, b = _validate_pair(a, b, peak)
    return ((a - b) ** 2).mean(dim=(1, 2, 3))


def mse(a: torch.Tensor, b: torch.Tensor, peak: float = DEFAULT_PEAK) -> torch.Tensor:
    """Mean of squared per-pixel differences"""
    return per_image_mse(a, b, peak).mean()


def psnr_max(peak: float = DEFAULT_PEAK, epsilon: float = DEFAULT_EPSILON) -> float:
    """PSNR ceiling implied by the MSE floor epsilon"""
    if peak <= 0 or epsilon <= 0:
        raise DomainError(f"psnr_max needs positive peak and epsilon, got {peak}, {epsilon}")
    return 10.0 * math.log10(peak ** 2 / epsilon)


def per_image_psnr(
    a: torch.Tensor,
    b: torch.Tensor,
    epsilon: float = DEFAULT_EPSILON,
    peak: float = DEFAULT_PEAK
) -> torch.Tensor:
    """PSNR in dB of every image pair, shape (N,)"""
    if epsilon <= 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    errors = per_image_mse(a, b, peak).clamp(min=epsilon)
    return 10.0 * torch.log10(peak ** 2 / errors)


def psnr(
    a: torch.Tensor,
    b: torch.Tensor,
    epsilon: float = DEFAULT_EPSILON,
    peak: float = DEFAULT_PEAK
) -> torch.Tensor:
    """PSNR = 10 log10(M^2 / max(MSE, eps)), averaged over image pairs"""
    return per_image_psnr(a, b, epsilon, peak).mean()


def gaussian_window(size: int, sigma: float, dtype: torch.dtype, device: torch.device) -> torch.Tensor:
    """Normalized 2-D Gaussian kernel of shape (1, 1, size, size)"""
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).unsqueeze(0).unsqueeze(0)


def effective_window_size(height: int, width: int, window_size: int = SSIM_WINDOW_SIZE) -> int:
    """Largest odd window no bigger than window_size that fits the image"""
    if min(height, width) < MIN_SSIM_SIZE:
        raise ShapeError(
            f"SSIM needs images of at least {MIN_SSIM_SIZE}x{MIN_SSIM_SIZE}, got {height}x{width}"
        )
    size = min(window_size, height, width)
    return size if size % 2 == 1 else size - 1


def ssim_map(
    a: torch.Tensor,
    b: torch.Tensor,
    peak: float = DEFAULT_PEAK,
    window_size: int = SSIM_WINDOW_SIZE,
    sigma: float = SSIM_SIGMA
) -> torch.Tensor:
    """Local SSIM values over valid window positions, clamped to [0, 1]"""
    a, b = _validate_pair(a, b, peak)
    size = effective_window_size(a.shape[-2], a.shape[-1], window_size)
    window = gaussian_window(size, sigma, a.dtype, a.device)

    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2

    mu_a = F.conv2d(a, window)
    mu_b = F.conv2d(b, window)
    var_a = F.conv2d(a * a, window) - mu_a * mu_a
    var_b = F.conv2d(b * b, window) - mu_b * mu_b
    cov = F.conv2d(a * b, window) - mu_a * mu_b

    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return (numerator / denominator).clamp(0.0, 1.0)


def per_image_ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    peak: float = DEFAULT_PEAK,
    window_size: int = SSIM_WINDOW_SIZE,
    sigma: float = SSIM_SIGMA
) -> torch.Tensor:
    """Mean local SSIM of every image pair, shape (N,)"""
    return ssim_map(a, b, peak, window_size, sigma).mean(dim=(1, 2, 3))


def ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    peak: float = DEFAULT_PEAK,
    window_size: int = SSIM_WINDOW_SIZE,
    sigma: float = SSIM_SIGMA
) -> torch.Tensor:
    """Structural similarity in [0, 1], averaged over image pairs"""
    return per_image_ssim(a, b, peak, window_size, sigma).mean()


def image_quality(
    sr: torch.Tensor,
    hr: torch.Tensor,
    epsilon: float = DEFAULT_EPSILON,
    peak: float = DEFAULT_PEAK
) -> MetricReport:
    """PSNR/SSIM report of a batch of reconstructions against their targets"""
    with torch.no_grad():
        return MetricReport(
            psnr_db=psnr(sr, hr, epsilon, peak).item(),
            ssim=ssim(sr, hr, peak).item()
        )


def _as_labels(values: Sequence[int]) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.int64).reshape(-1)


def confusion_matrix(predictions: Sequence[int], truths: Sequence[int]) -> np.ndarray:
    """6x6 grid where entry (i, j) counts samples with truth i predicted j"""
    predictions = _as_labels(predictions)
    truths = _as_labels(truths)
    if predictions.shape != truths.shape:
        raise ShapeError(f"{len(predictions)} predictions for {len(truths)} truths")
    for name, labels in (("prediction", predictions), ("truth", truths)):
        if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
            raise DomainError(f"{name} labels must lie in 0..{NUM_CLASSES - 1}")

    if truths.size == 0:
        return np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    grid = sk_confusion_matrix(truths, predictions, labels=list(range(NUM_CLASSES)))
    return grid.astype(np.int64)


def f1_scores(confusion: np.ndarray) -> Tuple[List[float], float]:
    """Per-class F1 (0 for degenerate classes) and their unweighted mean"""
    grid = np.asarray(confusion, dtype=np.float64)
    if grid.shape != (NUM_CLASSES, NUM_CLASSES):
        raise ShapeError(f"Confusion grid must be {NUM_CLASSES}x{NUM_CLASSES}, got {grid.shape}")
    if (grid < 0).any():
        raise DomainError("Confusion grid entries must be nonnegative")

    true_positives = np.diag(grid)
    # F1 = 2PR / (P + R) = 2TP / (predicted + actual)
    denominator = grid.sum(axis=0) + grid.sum(axis=1)
    per_class = np.divide(
        2.0 * true_positives,
        denominator,
        out=np.zeros(NUM_CLASSES, dtype=np.float64),
        where=denominator > 0
    )
    return per_class.tolist(), float(per_class.mean())
