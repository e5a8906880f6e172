"""Probabilistic two-stage detection objectives and the mask IoU loss.

Class vectors are indexed with 0 as background and 1..C as nucleus classes.
All kernels are scalar (or small-array) functions returning ``(value, grad)``.
Log arguments are clamped to at least ``EPS`` so every value and gradient
stays finite; a clamped input receives zero gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

EPS = 1e-7
MASK_SIZE = 14
MASK_SMOOTH = 1.0
BACKGROUND = 0


def _check_prob(name: str, p: float) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ValueError(f"{name} must be a probability in [0, 1], got {p}")
    return p


def _check_dist(probs, tol: float = 1e-9) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size < 2:
        raise ValueError(f"class distribution must be a vector of length C+1 >= 2, got shape {probs.shape}")
    if np.any(probs < 0) or np.any(probs > 1) or not np.all(np.isfinite(probs)):
        raise ValueError("class distribution entries must lie in [0, 1]")
    if abs(probs.sum() - 1.0) > tol:
        raise ValueError(f"class distribution must sum to 1, sums to {probs.sum():.12g}")
    return probs


def _clamp_low(x: float) -> tuple[float, float]:
    """Clamp a log argument from below; returns (value, d value / d x)."""
    if x < EPS:
        return EPS, 0.0
    return x, 1.0


def fuse_scores(objectness: float, cond) -> np.ndarray:
    """Joint class distribution from first-stage objectness and second-stage conditional.

    Every foreground class is scaled by the objectness; the background entry
    also absorbs the mass of proposals the first stage rejected.
    """
    obj = _check_prob("objectness", objectness)
    cond = _check_dist(cond)
    # inputs are accepted within 1e-9 of unit mass; renormalize so the output is exact
    fused = cond / math.fsum(cond) * obj
    fused[BACKGROUND] += 1.0 - obj
    return fused


def positive_log_likelihood(obj: float, cond_c: float) -> tuple[float, tuple[float, float]]:
    """log P(c | object) + log P(object), and its gradient w.r.t. (obj, cond_c)."""
    o, do = _clamp_low(float(obj))
    c, dc = _clamp_low(float(cond_c))
    return math.log(c) + math.log(o), (do / o, dc / c)


def bg_log_likelihood_exact(obj: float, cond_bg: float) -> tuple[float, tuple[float, float]]:
    """Exact background log-likelihood log(cond_bg * obj + 1 - obj)."""
    obj, cond_bg = float(obj), float(cond_bg)
    m, dm = _clamp_low(cond_bg * obj + 1.0 - obj)
    return math.log(m), (dm * (cond_bg - 1.0) / m, dm * obj / m)


def bg_lower_bound_first(obj: float, cond_bg: float) -> tuple[float, float]:
    """obj * log(cond_bg); objectness is a constant weight, gradient is w.r.t. cond_bg only."""
    obj = float(obj)
    c, dc = _clamp_low(float(cond_bg))
    return obj * math.log(c), obj * dc / c


def bg_lower_bound_second(obj: float) -> tuple[float, float]:
    """log(1 - obj) and its derivative w.r.t. obj."""
    q, dq = _clamp_low(1.0 - float(obj))
    return math.log(q), -dq / q


class Sample(NamedTuple):
    objectness: float
    cond: Sequence[float]
    is_positive: bool
    positive_class: int = BACKGROUND


class SampleGrad(NamedTuple):
    objectness: float
    cond: np.ndarray


def detection_loss(samples: Sequence) -> tuple[float, list[SampleGrad]]:
    """Mean negative objective over a batch of proposals.

    Positives contribute the factorized log-likelihood of their class;
    negatives contribute both background lower bounds.
    """
    if len(samples) == 0:
        raise ValueError("detection_loss needs at least one sample")
    n = len(samples)
    total = 0.0
    grads = []
    for s in samples:
        obj, cond, is_pos, cls = Sample(*s)
        cond = np.asarray(cond, dtype=np.float64)
        g_cond = np.zeros_like(cond)
        if is_pos:
            if not 1 <= cls < cond.size:
                raise ValueError(f"positive sample needs a foreground class in 1..{cond.size - 1}, got {cls}")
            v, (g_o, g_c) = positive_log_likelihood(obj, cond[cls])
            g_cond[cls] = g_c
        else:
            v1, g_c = bg_lower_bound_first(obj, cond[BACKGROUND])
            v2, g_o = bg_lower_bound_second(obj)
            v = v1 + v2
            g_cond[BACKGROUND] = g_c
        total += v
        grads.append(SampleGrad(-g_o / n, -g_cond / n))
    return -total / n, grads


def mask_iou_loss(pred, gt) -> tuple[float, np.ndarray]:
    """Smoothed soft-IoU loss ``1 - (I + 1) / (U + 1)`` between a probability mask and a binary mask."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if pred.shape != (MASK_SIZE, MASK_SIZE):
        raise ValueError(f"masks must be {MASK_SIZE}x{MASK_SIZE}, got {pred.shape}")
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground-truth mask must be binary")

    inter = float(np.sum(pred * gt))
    union = float(pred.sum() + gt.sum()) - inter
    num, den = inter + MASK_SMOOTH, union + MASK_SMOOTH
    # d(num/den)/dp = (g * den - num * (1 - g)) / den^2
    grad = -(gt * den - num * (1.0 - gt)) / (den * den)
    return 1.0 - num / den, grad


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 0.02
    warmup_iters: int = 2000
    total_iters: int = 15000
    drop_points: tuple[int, ...] = field(default=(12500, 14000))
    drop_factor: float = 10.0

    def __post_init__(self):
        points = (self.warmup_iters, *self.drop_points, self.total_iters)
        if any(a >= b for a, b in zip(points, points[1:])):
            raise ValueError(f"schedule breakpoints must increase strictly, got {points}")
        if self.base_lr <= 0 or self.drop_factor <= 0:
            raise ValueError("base_lr and drop_factor must be positive")


def lr_schedule(iteration: int, cfg: ScheduleConfig = ScheduleConfig()) -> float:
    """Linear warmup from 0, then step decay at each drop point."""
    if iteration < 0 or iteration > cfg.total_iters:
        raise ValueError(f"iteration must be in 0..{cfg.total_iters}, got {iteration}")
    if iteration < cfg.warmup_iters:
        return cfg.base_lr * iteration / cfg.warmup_iters
    lr = cfg.base_lr
    for point in cfg.drop_points:
        if iteration >= point:
            lr /= cfg.drop_factor
    return lr
