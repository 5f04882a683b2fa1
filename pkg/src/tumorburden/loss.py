"""Confidence-weighted segmentation loss with analytic gradients.

Per class, the loss is the mean of a voxel-averaged binary cross-entropy and
a soft DICE loss with a squared-norm denominator.  Each class loss is scaled
by a multiplier derived from the annotator's confidence (1-4) in that class
and the three classes are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nifti import ProbabilityVolume
from .volume import LabelVolume

CLASSES = ("et", "ed", "cavity")
CONFIDENCE_MULTIPLIERS = {1: 0.5, 2: 0.75, 3: 1.25, 4: 1.5}
DICE_EPS = 1e-7
CE_CLAMP = 1e-7


@dataclass
class LossValue:
    total: float
    per_class: dict[str, float]  # weighted class losses; total is their mean
    unweighted: dict[str, float]
    alphas: dict[str, float]
    gradient: np.ndarray


def alpha(level: int | None) -> float:
    if level is None:
        return 1.0
    if isinstance(level, bool) or level not in CONFIDENCE_MULTIPLIERS:
        raise ValueError(f"confidence level must be 1..4 or absent, got {level!r}")
    return CONFIDENCE_MULTIPLIERS[level]


def parse_confidences(text: str | None) -> dict[str, int]:
    """``"et=4,ed=3"`` -> ``{"et": 4, "ed": 3}``; missing classes stay absent."""
    out = {}
    if not text:
        return out
    for item in text.replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        name, sep, value = item.partition("=")
        name = name.strip().lower()
        if not sep or name not in CLASSES:
            raise ValueError(f"malformed confidence entry {item!r}")
        level = int(value)
        alpha(level)
        out[name] = level
    return out


def _check(p: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if p.shape != gt.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {gt.shape}")
    return p, gt


def soft_dice_loss(p, gt) -> tuple[float, np.ndarray]:
    """``1 - 2 sum(p*g) / (sum(p^2) + sum(g^2) + eps)`` and its gradient in ``p``."""
    p, g = _check(p, gt)
    inter = np.sum(p * g)
    denom = np.sum(p * p) + np.sum(g * g) + DICE_EPS
    value = 1.0 - 2.0 * inter / denom
    grad = -2.0 * (g * denom - 2.0 * inter * p) / (denom * denom)
    return float(value), grad


def cross_entropy_loss(p, gt) -> tuple[float, np.ndarray]:
    """Voxel-mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p, g = _check(p, gt)
    q = np.clip(p, CE_CLAMP, 1.0 - CE_CLAMP)
    n = p.size
    value = -np.sum(g * np.log(q) + (1.0 - g) * np.log1p(-q)) / n
    grad = -(g / q - (1.0 - g) / (1.0 - q)) / n
    grad = np.where((p > CE_CLAMP) & (p < 1.0 - CE_CLAMP), grad, 0.0)
    return float(value), grad


def class_loss(p, gt) -> tuple[float, np.ndarray]:
    ce, g_ce = cross_entropy_loss(p, gt)
    sd, g_sd = soft_dice_loss(p, gt)
    return 0.5 * (ce + sd), 0.5 * (g_ce + g_sd)


def confidence_weighted_loss_arrays(probs: np.ndarray, targets: np.ndarray, confidences=None) -> LossValue:
    """Loss over stacked channels ``probs[c]`` against binary ``targets[c]``, c in ET, ED, Cavity."""
    probs = np.asarray(probs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if probs.shape != targets.shape or probs.shape[0] != len(CLASSES):
        raise ValueError(f"expected matching (3, ...) arrays, got {probs.shape} and {targets.shape}")
    confidences = confidences or {}
    unknown = set(confidences) - set(CLASSES)
    if unknown:
        raise ValueError(f"unknown classes in confidences: {sorted(unknown)}")
    alphas = {c: alpha(confidences.get(c)) for c in CLASSES}
    per_class, unweighted = {}, {}
    grad = np.empty_like(probs)
    for idx, name in enumerate(CLASSES):
        value, g = class_loss(probs[idx], targets[idx])
        unweighted[name] = value
        per_class[name] = alphas[name] * value
        grad[idx] = alphas[name] * g / len(CLASSES)
    total = (per_class["et"] + per_class["ed"] + per_class["cavity"]) / len(CLASSES)
    return LossValue(total, per_class, unweighted, alphas, grad)


def confidence_weighted_loss(pv: ProbabilityVolume, gt: LabelVolume, confidences=None) -> LossValue:
    if pv.dims != gt.dims:
        raise ValueError(f"shape mismatch: probabilities {pv.dims} vs labels {gt.dims}")
    targets = np.stack([gt.labels == gt.label_semantics[c] for c in CLASSES]).astype(float)
    return confidence_weighted_loss_arrays(pv.channels, targets, confidences)
