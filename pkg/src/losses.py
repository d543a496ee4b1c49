#!/usr/bin/env python3
"""
Losses - Image-quality loss family and the classification-aware merged loss

    L1      mean |sr - hr| over every pixel of every image
    PSNR    (PSNR_max - PSNR) / PSNR_max
    SSIM    mean (1 - SSIM) over image pairs
    Combo   alpha * L_PSNR + beta * L_SSIM
    Hybrid  0.7 * L1 + 0.2 * L_SSIM + 0.1 * L_PSNR
    CLS     MSE between classifier logits on SR and on HR images
    merged  L_SR + L_CLS

Every function returns a LossValue whose `total` is a differentiable tensor
and whose `components` hold the plain float value of each sub-loss.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict

import torch
import torch.nn.functional as F

from .config import LossKind, LossSpec
from .exceptions import DomainError, NumericError, ShapeError
from .metrics import DEFAULT_EPSILON, DEFAULT_PEAK, NUM_CLASSES, per_image_psnr, per_image_ssim, psnr_max

logger = logging.getLogger(__name__)


@dataclass
class LossValue:
    """Loss total plus the named values it was combined from"""
    total: torch.Tensor
    components: Dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return float(self.total.detach().item())

    def record(self) -> Dict[str, float]:
        """Flat record for training logs"""
        return {"total": self.item(), **self.components}


def _ensure_finite(value: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(value.detach()).all():
        raise NumericError(f"{name} is not finite: {value.detach().item()}")
    return value


def _check_batches(sr_batch: torch.Tensor, hr_batch: torch.Tensor) -> None:
    if sr_batch.numel() == 0 or hr_batch.numel() == 0:
        raise DomainError("Empty batch")
    if sr_batch.shape != hr_batch.shape:
        raise ShapeError(f"SR/HR batch shapes differ: {tuple(sr_batch.shape)} vs {tuple(hr_batch.shape)}")


def l1_loss(sr_batch: torch.Tensor, hr_batch: torch.Tensor) -> LossValue:
    """Mean absolute per-pixel difference over all pixels and images"""
    _check_batches(sr_batch, hr_batch)
    total = _ensure_finite(F.l1_loss(sr_batch, hr_batch, reduction="mean"), "L1 loss")
    return LossValue(total=total, components={"l1": float(total.detach().item())})


def psnr_loss(
    sr_batch: torch.Tensor,
    hr_batch: torch.Tensor,
    epsilon: float = DEFAULT_EPSILON,
    peak: float = DEFAULT_PEAK
) -> LossValue:
    """Normalized PSNR shortfall, in [0, 1]"""
    _check_batches(sr_batch, hr_batch)
    ceiling = psnr_max(peak, epsilon)
    per_pair = (ceiling - per_image_psnr(sr_batch, hr_batch, epsilon, peak)) / ceiling
    total = _ensure_finite(per_pair.mean(), "PSNR loss")
    return LossValue(total=total, components={"psnr_loss": float(total.detach().item())})


def ssim_loss(sr_batch: torch.Tensor, hr_batch: torch.Tensor, peak: float = DEFAULT_PEAK) -> LossValue:
    """Mean dissimilarity 1 - SSIM over image pairs"""
    _check_batches(sr_batch, hr_batch)
    total = _ensure_finite((1.0 - per_image_ssim(sr_batch, hr_batch, peak)).mean(), "SSIM loss")
    return LossValue(total=total, components={"ssim_loss": float(total.detach().item())})


def combo_loss(sr_batch: torch.Tensor, hr_batch: torch.Tensor, spec: LossSpec, peak: float = DEFAULT_PEAK) -> LossValue:
    """alpha * L_PSNR + beta * L_SSIM"""
    if spec.kind != LossKind.COMBO:
        raise DomainError(f"combo_loss needs a Combo spec, got {spec.kind.value}")
    psnr_part = psnr_loss(sr_batch, hr_batch, spec.epsilon, peak)
    ssim_part = ssim_loss(sr_batch, hr_batch, peak)
    total = _ensure_finite(spec.alpha * psnr_part.total + spec.beta * ssim_part.total, "Combo loss")
    return LossValue(total=total, components={**psnr_part.components, **ssim_part.components})


def hybrid_loss(sr_batch: torch.Tensor, hr_batch: torch.Tensor, spec: LossSpec, peak: float = DEFAULT_PEAK) -> LossValue:
    """w_l1 * L1 + w_ssim * L_SSIM + w_psnr * L_PSNR"""
    if spec.kind != LossKind.HYBRID:
        raise DomainError(f"hybrid_loss needs a Hybrid spec, got {spec.kind.value}")
    w_l1, w_ssim, w_psnr = spec.hybrid_weights
    l1_part = l1_loss(sr_batch, hr_batch)
    ssim_part = ssim_loss(sr_batch, hr_batch, peak)
    psnr_part = psnr_loss(sr_batch, hr_batch, spec.epsilon, peak)
    total = _ensure_finite(
        w_l1 * l1_part.total + w_ssim * ssim_part.total + w_psnr * psnr_part.total,
        "Hybrid loss"
    )
    return LossValue(
        total=total,
        components={**l1_part.components, **ssim_part.components, **psnr_part.components}
    )


def sr_criterion(sr_batch: torch.Tensor, hr_batch: torch.Tensor, spec: LossSpec, peak: float = DEFAULT_PEAK) -> LossValue:
    """Image-quality loss selected by spec.kind"""
    if spec.kind == LossKind.L1:
        return l1_loss(sr_batch, hr_batch)
    if spec.kind == LossKind.COMBO:
        return combo_loss(sr_batch, hr_batch, spec, peak)
    if spec.kind == LossKind.HYBRID:
        return hybrid_loss(sr_batch, hr_batch, spec, peak)
    raise DomainError(f"Unknown loss kind: {spec.kind}")


def classification_loss(logits_sr: torch.Tensor, logits_hr: torch.Tensor) -> LossValue:
    """Mean squared difference between raw logits on SR and HR images"""
    for name, logits in (("SR", logits_sr), ("HR", logits_hr)):
        if logits.dim() != 2 or logits.shape[-1] != NUM_CLASSES:
            raise ShapeError(f"{name} logits must have shape (N, {NUM_CLASSES}), got {tuple(logits.shape)}")
    if logits_sr.shape != logits_hr.shape:
        raise ShapeError(f"Logit batches differ: {tuple(logits_sr.shape)} vs {tuple(logits_hr.shape)}")
    total = _ensure_finite(F.mse_loss(logits_sr, logits_hr, reduction="mean"), "Classification loss")
    return LossValue(total=total, components={"cls_loss": float(total.detach().item())})


def merged_loss(sr_loss: LossValue, cls_loss: LossValue) -> LossValue:
    """L_merged = L_SR + L_CLS"""
    sr_value, cls_value = sr_loss.item(), cls_loss.item()
    if not (math.isfinite(sr_value) and math.isfinite(cls_value)):
        raise NumericError(f"Merged loss inputs must be finite, got sr={sr_value}, cls={cls_value}")
    total = sr_loss.total + cls_loss.total
    components = {
        **sr_loss.components,
        **cls_loss.components,
        "sr_loss": sr_value,
        "cls_loss": cls_value,
        "merged_loss": sr_value + cls_value,
    }
    return LossValue(total=total, components=components)
