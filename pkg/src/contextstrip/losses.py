"""Segmentation losses: weighted pixel cross-entropy, soft Dice, and the
class-presence (SEC) loss on the encoding head, plus their weighted total."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .autodiff import ops
from .autodiff.tensor import Tensor

DICE_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    sec_weight: float = 0.1  # lambda
    classes: int = 2
    boundary_weight: float = 0.0  # w0 of the optional boundary-emphasis map; 0 disables it
    boundary_sigma: float = 5.0

    def __post_init__(self):
        if self.sec_weight < 0:
            raise ValueError(f"LossConfig.sec_weight must be >= 0, got {self.sec_weight}")
        if self.classes < 2:
            raise ValueError(f"LossConfig.classes must be >= 2, got {self.classes}")
        if self.boundary_weight < 0 or self.boundary_sigma <= 0:
            raise ValueError("boundary_weight must be >= 0 and boundary_sigma > 0")


@dataclass
class LossBreakdown:
    ce: Tensor
    dice: Tensor
    sec: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("ce", "dice", "sec", "total")}


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    """N,H,W integer labels -> N,C,H,W one-hot float array."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes}), found range [{labels.min()}, {labels.max()}]")
    return (labels[:, None] == np.arange(classes)[None, :, None, None]).astype(np.float64)


def _check_one_hot(target: np.ndarray, shape) -> np.ndarray:
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if target.shape != tuple(shape):
        raise ValueError(f"target shape {target.shape} does not match probabilities {tuple(shape)}")
    if not (np.all((target == 0) | (target == 1)) and np.all(target.sum(axis=1) == 1)):
        raise ValueError("target is not one-hot along the class axis")
    return target


def cross_entropy_loss(probs: Tensor, target, weight_map: Optional[np.ndarray] = None) -> Tensor:
    """Mean over N*H*W pixels of -sum_l w(x) g_l(x) log p_l(x)."""
    target = _check_one_hot(target, probs.shape)
    n, _, h, w = probs.shape
    coef = target / (n * h * w)
    if weight_map is not None:
        weight_map = np.asarray(weight_map)
        if weight_map.shape != (n, h, w):
            raise ValueError(f"weight map must be {(n, h, w)}, got {weight_map.shape}")
        if np.any(weight_map <= 0):
            raise ValueError("weight map must be positive")
        coef = coef * weight_map[:, None]
    return ops.mul(ops.sum(ops.mul(ops.log(probs), coef)), -1.0)


def dice_terms(probs: Tensor, target) -> Tensor:
    """Per-class soft Dice terms -2 sum(p g) / (sum p^2 + sum g^2 + eps), pooled over the batch."""
    target = _check_one_hot(target, probs.shape)
    axes = (0, 2, 3)
    overlap = ops.sum(ops.mul(probs, target), axis=axes)
    denom = ops.add(ops.sum(ops.square(probs), axis=axes), (target * target).sum(axis=axes) + DICE_EPS)
    return ops.mul(ops.div(overlap, denom), -2.0)


def dice_loss(probs: Tensor, target) -> Tensor:
    return ops.mean(dice_terms(probs, target))


def sec_loss(class_probs: Tensor, presence) -> Tensor:
    """Binary cross-entropy of the presence head, averaged over classes and batch."""
    y = np.asarray(presence.data if isinstance(presence, Tensor) else presence, dtype=np.float64)
    if y.shape != class_probs.shape:
        raise ValueError(f"presence labels {y.shape} do not match class probabilities {class_probs.shape}")
    hit = ops.mul(ops.log(class_probs), y)
    miss = ops.mul(ops.log(ops.sub(1.0, class_probs)), 1.0 - y)
    return ops.mul(ops.mean(ops.add(hit, miss)), -1.0)


def combine(ce: Tensor, dice: Tensor, sec: Tensor, sec_weight: float) -> Tensor:
    return ops.add(ops.add(ce, dice), ops.mul(sec, sec_weight))


def total_loss(pixel_probs: Tensor, class_probs: Tensor, target, presence, cfg: LossConfig = LossConfig(),
               weight_map: Optional[np.ndarray] = None) -> LossBreakdown:
    """All three losses on one batch and ``ce + dice + sec_weight * sec``."""
    if weight_map is None and cfg.boundary_weight > 0:
        labels = np.asarray(target).argmax(axis=1)
        weight_map = np.stack([boundary_weight_map(m, cfg.boundary_weight, cfg.boundary_sigma) for m in labels])
    ce = cross_entropy_loss(pixel_probs, target, weight_map)
    dice = dice_loss(pixel_probs, target)
    sec = sec_loss(class_probs, presence)
    return LossBreakdown(ce, dice, sec, combine(ce, dice, sec, cfg.sec_weight))


def class_presence_labels(mask_slice: np.ndarray, classes: int) -> np.ndarray:
    """y_i = 1 iff class i labels at least one pixel. Works on H,W or batched N,H,W grids."""
    mask_slice = np.asarray(mask_slice)
    if mask_slice.size and (mask_slice.min() < 0 or mask_slice.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes}), found range [{mask_slice.min()}, {mask_slice.max()}]")
    flat = mask_slice.reshape(-1, mask_slice.shape[-2] * mask_slice.shape[-1])
    present = np.stack([np.any(flat == c, axis=1) for c in range(classes)], axis=1).astype(np.float64)
    return present[0] if mask_slice.ndim == 2 else present


def boundary_weight_map(mask: np.ndarray, w0: float = 10.0, sigma: float = 5.0) -> np.ndarray:
    """1 + w0 * exp(-d^2 / 2 sigma^2), d being the distance to the nearest mask boundary."""
    mask = np.asarray(mask) > 0
    if not mask.any() or mask.all():
        return np.ones(mask.shape)
    d = ndimage.distance_transform_edt(mask) + ndimage.distance_transform_edt(~mask)  # one term is 0 per pixel
    return 1.0 + w0 * np.exp(-(d ** 2) / (2.0 * sigma ** 2))
