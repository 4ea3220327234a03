import numpy as np
import pytest

from elastigen.perceptual import (
    FeaturePyramidWeights, consistency_metric, perceptual_distance,
)
from elastigen.tensor import Tensor, TensorError, downsample2x, grad_check, no_grad


def _img(rng, res=16, n=1):
    return rng.standard_normal((n, 3, res, res)).astype(np.float32)


def test_identity_distance_zero():
    x = Tensor(_img(np.random.default_rng(0)))
    with no_grad():
        d = perceptual_distance(x, x)
    assert float(d.numpy()) == 0.0


def test_symmetry_bit_exact():
    rng = np.random.default_rng(1)
    a, b = Tensor(_img(rng)), Tensor(_img(rng))
    with no_grad():
        dab = float(perceptual_distance(a, b).numpy())
        dba = float(perceptual_distance(b, a).numpy())
    assert dab == dba
    assert dab > 0


def test_noise_closer_than_unrelated():
    rng = np.random.default_rng(2)
    wins = 0
    for _ in range(100):
        x = _img(rng)
        noisy = x + rng.standard_normal(x.shape).astype(np.float32) * 0.02
        other = _img(rng)
        with no_grad():
            d_near = float(perceptual_distance(Tensor(x), Tensor(noisy)).numpy())
            d_far = float(perceptual_distance(Tensor(x), Tensor(other)).numpy())
        wins += d_near < d_far
    assert wins == 100


def test_weights_deterministic_from_seed():
    w1 = FeaturePyramidWeights(7)
    w2 = FeaturePyramidWeights(7)
    for a, b in zip(w1.stages, w2.stages):
        assert np.array_equal(a.numpy(), b.numpy())
    w3 = FeaturePyramidWeights(8)
    assert not np.array_equal(w1.stages[0].numpy(), w3.stages[0].numpy())


def test_consistency_zero_for_identical():
    x = Tensor(_img(np.random.default_rng(3), res=32))
    with no_grad():
        assert float(consistency_metric(x, x).numpy()) == 0.0


def test_consistency_zero_when_sub_is_downsample():
    full = Tensor(_img(np.random.default_rng(4), res=32))
    with no_grad():
        sub = downsample2x(full)
        v = float(consistency_metric(sub, full).numpy())
    assert v == 0.0


def test_consistency_matches_recomputation():
    rng = np.random.default_rng(5)
    full = Tensor(_img(rng, res=32))
    sub = Tensor(_img(rng, res=16))
    with no_grad():
        combined = float(consistency_metric(sub, full).numpy())
        target = downsample2x(full)
        msev = float(np.mean((sub.numpy() - target.numpy()) ** 2))
        percv = float(perceptual_distance(sub, target).numpy())
    assert combined == pytest.approx(msev + percv, rel=1e-6)


def test_consistency_rejects_larger_sub():
    small = Tensor(_img(np.random.default_rng(6), res=16))
    big = Tensor(_img(np.random.default_rng(7), res=32))
    with pytest.raises(TensorError, match="larger"):
        consistency_metric(big, small)


def test_consistency_gradcheck_wrt_sub():
    rng = np.random.default_rng(8)
    full = Tensor(rng.standard_normal((1, 3, 16, 16)), dtype=np.float64)

    def builder():
        sub = Tensor(rng.standard_normal((1, 3, 8, 8)) * 0.5, dtype=np.float64)
        return [sub], lambda: consistency_metric(sub, full)

    assert grad_check(builder, coords_per_leaf=16) < 1e-3
