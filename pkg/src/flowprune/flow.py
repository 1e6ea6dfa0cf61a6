"""Stage grouping of tapped features and the learned projections that
bridge shape changes between stages."""

from __future__ import annotations

import numpy as np

from flowprune import tensor as T
from flowprune.tensor import ConfigError, ShapeError, Tensor


class StageGroup:
    """Maximal run of consecutive taps sharing one feature shape."""

    __slots__ = ("features", "feature_shape", "stage_index")

    def __init__(self, features, stage_index):
        self.features = list(features)
        self.feature_shape = self.features[0].shape[1:]
        self.stage_index = stage_index

    def __len__(self):
        return len(self.features)


class FeatureFlow:
    """Ordered, stage-grouped sequence of tapped features for one pass."""

    __slots__ = ("stages", "sample_count")

    def __init__(self, stages):
        self.stages = stages
        self.sample_count = stages[0].features[0].shape[0]

    def __len__(self):
        return sum(len(s) for s in self.stages)

    def all_features(self):
        return [f for s in self.stages for f in s.features]


def group_by_stage(taps):
    """Split an ordered tap list into stages at every shape change."""
    if not taps:
        raise ShapeError("group_by_stage: empty tap list")
    stages = []
    current = [taps[0]]
    for t in taps[1:]:
        if t.shape[0] != taps[0].shape[0]:
            raise ShapeError("group_by_stage: taps disagree on batch size")
        if t.shape[1:] == current[-1].shape[1:]:
            current.append(t)
        else:
            stages.append(StageGroup(current, len(stages)))
            current = [t]
    stages.append(StageGroup(current, len(stages)))
    return FeatureFlow(stages)


class Projection:
    """Trainable map taking stage g-1's feature shape to stage g's.

    Conv features use a 1x1 convolution whose stride divides the spatial
    sizes; vector features use a dense matrix.
    """

    __slots__ = ("w", "stride", "in_shape", "out_shape", "name")

    def __init__(self, w, stride, in_shape, out_shape, name):
        self.w = w
        self.stride = stride
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self.name = name

    def apply(self, x):
        if x.shape[1:] != self.in_shape:
            raise ShapeError(
                f"projection {self.name}: expected {self.in_shape}, got {x.shape[1:]}"
            )
        if self.stride is None:
            return T.linear(x, self.w)
        return T.conv2d(x, self.w, stride=self.stride)


def _boundary_projection(rng, in_shape, out_shape, index):
    name = f"proj{index}.w"
    if len(in_shape) == 3 and len(out_shape) == 3:
        c_in, h_in, _ = in_shape
        c_out, h_out, _ = out_shape
        stride = h_in // h_out
        if stride < 1 or (h_in - 1) // stride + 1 != h_out:
            raise ConfigError(
                f"projection {index}: no 1x1 conv stride maps {in_shape} to {out_shape}"
            )
        w = T.param(rng.standard_normal((c_out, c_in, 1, 1)) * np.sqrt(2.0 / c_in), name)
        return Projection(w, stride, in_shape, out_shape, name)
    if len(in_shape) == 1 and len(out_shape) == 1:
        w = T.param(
            rng.standard_normal((out_shape[0], in_shape[0])) * np.sqrt(2.0 / in_shape[0]),
            name,
        )
        return Projection(w, None, in_shape, out_shape, name)
    raise ConfigError(f"projection {index}: unsupported shapes {in_shape} -> {out_shape}")


def make_projections(tap_shapes, rng):
    """One projection per stage boundary (consecutive shape change)."""
    projs = []
    for i in range(1, len(tap_shapes)):
        if tap_shapes[i] != tap_shapes[i - 1]:
            projs.append(_boundary_projection(rng, tap_shapes[i - 1], tap_shapes[i], len(projs) + 1))
    return projs


def projection_params(projs):
    return {p.name: p.w for p in projs}
