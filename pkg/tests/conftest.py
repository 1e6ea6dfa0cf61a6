"""Shared helpers: finite-difference gradients and kink-safe random data."""

import numpy as np
import pytest


def fd_gradient(f, arrays, k, eps=1e-5):
    """Central-difference gradient of scalar f(arrays) w.r.t. arrays[k].

    Mutates arrays[k] in place coordinate by coordinate and restores it.
    """
    flat = arrays[k].ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(arrays)
        flat[i] = orig - eps
        lo = f(arrays)
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(arrays[k].shape)


def max_rel_err(analytic, numeric, floor=1e-6):
    """Worst-case relative error between two gradient arrays."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def spaced_values(rng, shape, gap=0.1, offset=0.05):
    """Random array whose values are pairwise at least ``gap`` apart and at
    least ``offset`` from zero.

    Keeps finite-difference probes (step 1e-5) away from the kinks of
    relu, max pooling, and absolute values.
    """
    size = int(np.prod(shape))
    vals = (rng.permutation(size) - size / 2.0) * gap + offset
    return vals.reshape(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def flow_penalty_oracle(stages, proj_ws, proj_strides, k1, k2, spatial_scaling=True):
    """Flatten-and-sum reference for the staged flow penalties.

    ``stages`` holds raw [B, ...] arrays grouped by shape; ``proj_ws`` and
    ``proj_strides`` give one boundary map per consecutive stage pair
    (dense matrix with stride None, or a 1x1 conv kernel with an int
    stride). Everything is computed with plain loops over flattened
    vectors, then batch-averaged and stage-scaled.
    """
    b = stages[0][0].shape[0]
    first = stages[0][0].shape[1:]

    def scale_of(shape):
        if spatial_scaling and len(shape) == 3 and len(first) == 3:
            return (first[1] * first[2]) / (shape[1] * shape[2])
        return 1.0

    def project(prev, w, stride):
        if stride is None:
            return prev @ w.T
        sub = prev[:, :, ::stride, ::stride]
        return np.einsum("fc,bchw->bfhw", w[:, :, 0, 0], sub)

    length = 0.0
    curvature = 0.0
    for g, feats in enumerate(stages):
        sc = scale_of(feats[0].shape[1:])
        pts = list(feats)
        if g > 0:
            prev = stages[g - 1][-1]
            pts = [project(prev, proj_ws[g - 1], proj_strides[g - 1])] + pts
        flat = [p.reshape(b, -1) for p in pts]
        for i in range(len(flat) - 1):
            length += sc * np.abs(flat[i + 1] - flat[i]).sum()
        for i in range(1, len(flat) - 1):
            curvature += sc * np.abs(flat[i + 1] - 2.0 * flat[i] + flat[i - 1]).sum()
    return k1 * length / b, k2 * curvature / b


def random_staged_flow(rng, batch=3, vector=False):
    """Random stage structure plus matching projection arrays.

    Returns (stage arrays, projection weights, projection strides).
    Shapes shrink across boundaries the way pooled conv stacks do.
    """
    n_stages = int(rng.integers(1, 4))
    stages = []
    proj_ws = []
    proj_strides = []
    if vector:
        dims = []
        for _ in range(n_stages):
            d = int(rng.integers(2, 7))
            while dims and d == dims[-1]:
                d = int(rng.integers(2, 7))
            dims.append(d)
        for g in range(n_stages):
            count = int(rng.integers(1, 4))
            stages.append([rng.standard_normal((batch, dims[g])) for _ in range(count)])
            if g > 0:
                proj_ws.append(rng.standard_normal((dims[g], dims[g - 1])))
                proj_strides.append(None)
        return stages, proj_ws, proj_strides
    hw = 8
    c = int(rng.integers(2, 5))
    for g in range(n_stages):
        count = int(rng.integers(1, 4))
        stages.append([rng.standard_normal((batch, c, hw, hw)) for _ in range(count)])
        if g + 1 < n_stages:
            c2 = int(rng.integers(2, 5)) + c
            proj_ws.append(rng.standard_normal((c2, c, 1, 1)))
            proj_strides.append(2)
            c = c2
            hw //= 2
    return stages, proj_ws, proj_strides
