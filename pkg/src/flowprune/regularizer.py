"""Feature-flow penalties: L1 path length and discrete total absolute
curvature of the tapped feature polyline, staged across shape changes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flowprune import tensor as T
from flowprune.tensor import ConfigError, Tensor


@dataclass
class FfrConfig:
    k1: float = 0.0
    k2: float = 0.0
    enabled: bool = True
    stage_scaling: str = "spatial"

    def __post_init__(self):
        if self.k1 < 0 or self.k2 < 0:
            raise ConfigError("ffr coefficients must be nonnegative")
        if self.stage_scaling not in ("spatial", "none"):
            raise ConfigError(f"unknown stage_scaling {self.stage_scaling!r}")

    @property
    def active(self):
        return self.enabled and (self.k1 > 0 or self.k2 > 0)


def _stage_scales(flow, cfg):
    """Per-stage multiplier: spatial element count relative to stage 1."""
    first = flow.stages[0].feature_shape
    scales = []
    for stage in flow.stages:
        shape = stage.feature_shape
        if cfg.stage_scaling == "spatial" and len(shape) == 3 and len(first) == 3:
            scales.append((first[1] * first[2]) / (shape[1] * shape[2]))
        else:
            scales.append(1.0)
    return scales


def _projected_boundaries(flow, projections):
    """Project each stage's last feature into the next stage's shape.

    Returns a list aligned with stages[1:]; entries are shared between
    the length and curvature terms so each boundary is projected once.
    """
    n_bound = len(flow.stages) - 1
    if len(projections) != n_bound:
        raise ConfigError(
            f"flow has {n_bound} stage boundaries but {len(projections)} projections"
        )
    return [
        projections[g - 1].apply(flow.stages[g - 1].features[-1])
        for g in range(1, len(flow.stages))
    ]


def _fold(terms):
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def ffr_length(flow, projections, cfg, _projected=None):
    """k1-scaled, batch-averaged L1 length of the feature polyline.

    Stage boundaries contribute one segment from the projected previous
    feature to the stage's first feature; each segment is weighted by
    its stage's scale multiplier.
    """
    scales = _stage_scales(flow, cfg)
    b = flow.sample_count
    projected = _projected if _projected is not None else _projected_boundaries(flow, projections)
    terms = []
    for g, stage in enumerate(flow.stages):
        coef = cfg.k1 * scales[g] / b
        feats = stage.features
        if g > 0:
            terms.append(T.scale(T.l1_norm(T.sub(feats[0], projected[g - 1])), coef))
        for i in range(len(feats) - 1):
            terms.append(T.scale(T.l1_norm(T.sub(feats[i + 1], feats[i])), coef))
    if not terms:
        return Tensor(0.0)
    return _fold(terms)


def ffr_curvature(flow, projections, cfg, _projected=None):
    """k2-scaled, batch-averaged total absolute discrete curvature.

    Second differences within each stage, plus one straddling triple per
    boundary built on the projected previous feature. A stage holding a
    single feature yields no straddling triple.
    """
    if len(flow) < 3:
        return Tensor(0.0)
    scales = _stage_scales(flow, cfg)
    b = flow.sample_count
    projected = _projected if _projected is not None else _projected_boundaries(flow, projections)
    terms = []
    for g, stage in enumerate(flow.stages):
        coef = cfg.k2 * scales[g] / b
        feats = stage.features
        if g > 0 and len(feats) >= 2:
            second = T.add(
                T.sub(feats[1], T.scale(feats[0], 2.0)), projected[g - 1]
            )
            terms.append(T.scale(T.l1_norm(second), coef))
        for i in range(1, len(feats) - 1):
            second = T.add(T.sub(feats[i + 1], T.scale(feats[i], 2.0)), feats[i - 1])
            terms.append(T.scale(T.l1_norm(second), coef))
    if not terms:
        return Tensor(0.0)
    return _fold(terms)


def length_uniform(taps, cfg):
    """L1 polyline length over same-shape taps (no stages, no projections)."""
    b = taps[0].shape[0]
    coef = cfg.k1 * 1.0 / b
    terms = [
        T.scale(T.l1_norm(T.sub(taps[i + 1], taps[i])), coef)
        for i in range(len(taps) - 1)
    ]
    if not terms:
        return Tensor(0.0)
    return _fold(terms)


def curvature_uniform(taps, cfg):
    """Total absolute second difference over same-shape taps."""
    if len(taps) < 3:
        return Tensor(0.0)
    b = taps[0].shape[0]
    coef = cfg.k2 * 1.0 / b
    terms = [
        T.scale(
            T.l1_norm(T.add(T.sub(taps[i + 1], T.scale(taps[i], 2.0)), taps[i - 1])),
            coef,
        )
        for i in range(1, len(taps) - 1)
    ]
    return _fold(terms)


def total_loss(task_loss, flow, projections, cfg):
    """Task loss plus the active feature-flow penalties.

    With the regularizer disabled (or both coefficients zero) the task
    loss tensor is returned unchanged, so baselines are untouched by
    this code path.
    """
    if not cfg.active:
        return task_loss
    projected = _projected_boundaries(flow, projections)
    parts = [task_loss]
    if cfg.k1 > 0:
        parts.append(ffr_length(flow, projections, cfg, _projected=projected))
    if cfg.k2 > 0:
        parts.append(ffr_curvature(flow, projections, cfg, _projected=projected))
    return _fold(parts)


# ---------------------------------------------------------------------------
# raw measurements (no coefficients, no stage scaling, no tape)


def measure_mean_length(points):
    """Mean per-sample L1 polyline length over raw [B, ...] arrays."""
    total = 0.0
    for a, b in zip(points[:-1], points[1:]):
        d = np.abs(b - a).reshape(len(a), -1).sum(axis=1)
        total += d
    return float(np.mean(total))


def measure_mean_curvature(points):
    """Mean per-sample total absolute second difference over raw arrays."""
    total = 0.0
    for a, b, c in zip(points[:-2], points[1:-1], points[2:]):
        d = np.abs(c - 2.0 * b + a).reshape(len(a), -1).sum(axis=1)
        total += d
    return float(np.mean(total))
