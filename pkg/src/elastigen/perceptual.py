"""Deterministic perceptual-distance proxy and the combined consistency metric.

A three-stage random-feature pyramid stands in for a pretrained perceptual
network: weights are drawn once from a seeded unit Gaussian and frozen, so
the metric is reproducible across processes with no model download. Scale
is irrelevant by construction (convs are linear, leaky_relu is positively
homogeneous, and features are unit-normalized per location).
"""

from __future__ import annotations

import numpy as np

from elastigen.tensor import (
    Tensor, TensorError, add, channel_norm, conv2d, downsample2x,
    leaky_relu, mse, mul,
)

DEFAULT_FEATURE_SEED = 7
_STAGE_CHANNELS = (8, 16, 32)


class FeaturePyramidWeights:
    """Frozen conv weights for the three feature stages (3x3, stride 2)."""

    def __init__(self, seed: int = DEFAULT_FEATURE_SEED):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.stages: list[Tensor] = []
        c_in = 3
        for c_out in _STAGE_CHANNELS:
            w = rng.standard_normal((c_out, c_in, 3, 3)).astype(np.float32)
            self.stages.append(Tensor(w))
            c_in = c_out

    def cast(self, dtype) -> "FeaturePyramidWeights":
        out = FeaturePyramidWeights.__new__(FeaturePyramidWeights)
        out.seed = self.seed
        out.stages = [Tensor(w.numpy(), dtype=dtype) for w in self.stages]
        return out


_default_weights: dict[tuple[int, str], FeaturePyramidWeights] = {}


def _weights_for(dtype, seed: int) -> FeaturePyramidWeights:
    key = (seed, np.dtype(dtype).name)
    if key not in _default_weights:
        base = FeaturePyramidWeights(seed)
        _default_weights[key] = base if np.dtype(dtype) == np.float32 else base.cast(dtype)
    return _default_weights[key]


def _features(x: Tensor, weights: FeaturePyramidWeights) -> list[Tensor]:
    feats = []
    h = x
    for i, w in enumerate(weights.stages):
        h = conv2d(h, w, pad=1)
        # stride-2 stage realized as same-res conv + area pooling so odd
        # shapes never arise; then rectify for feature diversity
        h = downsample2x(h)
        h = leaky_relu(h)
        feats.append(channel_norm(h, eps=1e-10))
    return feats


def perceptual_distance(a: Tensor, b: Tensor,
                        weights: FeaturePyramidWeights | None = None) -> Tensor:
    """Mean over stages of mean squared difference of unit-normalized features.

    Symmetric, non-negative, zero iff the pyramids agree. Differentiable
    w.r.t. both images.
    """
    if a.shape != b.shape:
        raise TensorError(f"perceptual_distance: shape mismatch {a.shape} vs {b.shape}")
    if a.data.ndim != 4 or a.shape[1] != 3:
        raise TensorError(f"perceptual_distance: expected [N,3,H,W], got {a.shape}")
    if a.shape[2] < 8 or a.shape[3] < 8:
        raise TensorError(f"perceptual_distance: spatial dims must be >= 8, got {a.shape}")
    if weights is None:
        weights = _weights_for(a.dtype, DEFAULT_FEATURE_SEED)
    fa = _features(a, weights)
    fb = _features(b, weights)
    total = None
    for xa, xb in zip(fa, fb):
        d = mse(xa, xb)
        total = d if total is None else add(total, d)
    return mul(total, 1.0 / len(fa))


def consistency_metric(sub_out: Tensor, full_out: Tensor,
                       weights: FeaturePyramidWeights | None = None) -> Tensor:
    """MSE + perceptual distance between a sub-generator output and the full
    output, after area-downsampling the full output to the sub resolution."""
    if sub_out.shape[2] > full_out.shape[2] or sub_out.shape[3] > full_out.shape[3]:
        raise TensorError(
            f"consistency_metric: sub output {sub_out.shape} larger than full {full_out.shape}")
    target = full_out
    while target.shape[2] > sub_out.shape[2]:
        target = downsample2x(target)
    if target.shape != sub_out.shape:
        raise TensorError(
            f"consistency_metric: resolutions not related by powers of two: "
            f"{sub_out.shape} vs {full_out.shape}")
    return add(mse(sub_out, target), perceptual_distance(sub_out, target, weights))
