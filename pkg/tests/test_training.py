import math

import numpy as np
import pytest

from elastigen.data import DatasetSpec, generate
from elastigen.discriminator import DiscriminatorWeights, discriminate
from elastigen.generator import (
    ArchDescriptor, ConfigError, GeneratorWeights, encode_g_arch, full_config,
    smallest_config,
)
from elastigen.tensor import Tensor, backward, dense, mul, tsum, tmean, no_grad
from elastigen.training import (
    Adam, TrainConfig, TrainingDiverged, gan_losses, r1_penalty, _r1_surrogate,
    run_stage, sample_config,
)

DESC = ArchDescriptor()


# ---------------------------------------------------------------------------
# config sampling

def test_sandwich_frequencies():
    # the sandwich arms are ratio-vector classes; resolution is independent
    rng = np.random.default_rng(0)
    n = 100_000
    n_full = n_small = 0
    for _ in range(n):
        cfg = sample_config(rng, "flexible", DESC)
        active = cfg.ratios[:cfg.active_layers]
        if all(r == 1.0 for r in active):
            n_full += 1
        elif all(r == 0.25 for r in active):
            n_small += 1
    assert abs(n_full / n - 0.25) <= 0.005
    assert abs(n_small / n - 0.25) <= 0.005


def test_uniform_mode_same_ratio_everywhere():
    rng = np.random.default_rng(1)
    for _ in range(200):
        cfg = sample_config(rng, "uniform", DESC)
        active = cfg.ratios[:cfg.active_layers]
        assert len(set(active)) == 1


def test_sampling_reproducible():
    a = [sample_config(np.random.default_rng(7), "flexible", DESC) for _ in range(10)]
    b = [sample_config(np.random.default_rng(7), "flexible", DESC) for _ in range(10)]
    assert a == b


def test_resolution_draw_uniform():
    rng = np.random.default_rng(2)
    counts = {k: 0 for k in DESC.supported_blocks}
    n = 10_000
    for _ in range(n):
        counts[sample_config(rng, "flexible", DESC).res_block] += 1
    for k, c in counts.items():
        assert abs(c / n - 1 / len(DESC.supported_blocks)) < 0.02, (k, c)


# ---------------------------------------------------------------------------
# losses

def test_gan_losses_at_zero_logits():
    zeros = Tensor(np.zeros((4, 1), dtype=np.float32))
    g_loss, d_loss = gan_losses(zeros, zeros)
    assert float(d_loss.numpy()) == pytest.approx(2 * math.log(2), rel=1e-6)
    assert float(g_loss.numpy()) == pytest.approx(math.log(2), rel=1e-6)


def test_gan_losses_saturated_discriminator():
    real = Tensor(np.full((4, 1), 40.0, dtype=np.float32))
    fake = Tensor(np.full((4, 1), -40.0, dtype=np.float32))
    _, d_loss = gan_losses(real, fake)
    assert float(d_loss.numpy()) < 1e-8


def test_g_loss_gradient_at_zero_is_minus_half():
    d_fake = Tensor(np.zeros((1, 1), dtype=np.float32), requires_grad=True)
    g_loss, _ = gan_losses(Tensor(np.zeros((1, 1), dtype=np.float32)), d_fake)
    backward(g_loss)
    assert float(d_fake.grad.numpy()) == pytest.approx(-0.5, rel=1e-6)


# ---------------------------------------------------------------------------
# r1 penalty

def test_r1_zero_for_constant_discriminator():
    x = Tensor(np.random.default_rng(3).standard_normal((2, 3, 4, 4)), requires_grad=True)
    logit = add_const = mul(tsum(mul(x, 0.0)), 1.0)  # constant in x
    assert r1_penalty(logit, x, gamma=10.0) == 0.0


def test_r1_linear_discriminator_analytic():
    rng = np.random.default_rng(4)
    c = rng.standard_normal((1, 48)).astype(np.float32)
    x = Tensor(rng.standard_normal((3, 48)).astype(np.float32), requires_grad=True)
    logit = dense(x, Tensor(c))
    gamma = 10.0
    got = r1_penalty(logit, x, gamma)
    want = 0.5 * gamma * float((c.astype(np.float64) ** 2).sum())
    assert got == pytest.approx(want, rel=1e-5)


def test_r1_surrogate_value_matches_exact_and_fd():
    rng = np.random.default_rng(5)
    w = DiscriminatorWeights(DESC, seed=9, dtype=np.float64)
    garch = encode_g_arch(full_config(DESC), DESC)
    xv = rng.standard_normal((2, 3, 32, 32))
    x = Tensor(xv, dtype=np.float64, requires_grad=True)

    def d_apply(img):
        return discriminate(img, 4, garch, w)

    logits = d_apply(x)
    pen, exact = _r1_surrogate(d_apply, x, logits, gamma_eff=2.0, fd_eps=1e-4)
    assert float(pen.numpy()) == pytest.approx(exact, rel=1e-3)
    # independent finite-difference estimate of mean ||grad||^2
    h = 1e-5
    g_fd = np.zeros_like(xv)
    idx = [(0, 0, 3, 7), (1, 2, 10, 20), (0, 1, 31, 0), (1, 0, 16, 16)]
    from elastigen.tensor import grad_of
    gx = grad_of(tsum(d_apply(Tensor(xv, dtype=np.float64, requires_grad=True))), [])
    for n, c, i, j in idx:
        xp = xv.copy(); xp[n, c, i, j] += h
        xm = xv.copy(); xm[n, c, i, j] -= h
        with no_grad():
            fp = float(d_apply(Tensor(xp, dtype=np.float64)).numpy().sum())
            fm = float(d_apply(Tensor(xm, dtype=np.float64)).numpy().sum())
        g_fd[n, c, i, j] = (fp - fm) / (2 * h)
    x2 = Tensor(xv, dtype=np.float64, requires_grad=True)
    got = r1_penalty(d_apply(x2), x2, gamma=1.0)
    # spot-check the tape gradient against the FD gradient coordinates
    from elastigen.tensor import grad_of as go
    x3 = Tensor(xv, dtype=np.float64, requires_grad=True)
    gx3 = go(tsum(d_apply(x3)), [x3])[0]
    for n, c, i, j in idx:
        assert gx3[n, c, i, j] == pytest.approx(g_fd[n, c, i, j], rel=1e-3)


# ---------------------------------------------------------------------------
# optimizer

def test_adam_converges_on_quadratic():
    target = np.array([1.0, -2.0, 3.0], dtype=np.float32)
    p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(400):
        opt.zero_grad()
        diff = mul(tsum(mul(p - Tensor(target), p - Tensor(target))), 0.5)
        backward(diff)
        opt.step()
    np.testing.assert_allclose(p.numpy(), target, atol=1e-2)


# ---------------------------------------------------------------------------
# stage mechanics (tiny smoke runs; the heavy runs live in the acceptance suite)

@pytest.fixture(scope="module")
def tiny_dataset():
    return generate(DatasetSpec(count=64, resolution=32, seed=0))


def test_stage_prerequisites_enforced(tiny_dataset):
    with pytest.raises(ConfigError, match="requires"):
        run_stage(TrainConfig(stage="multires", total_images=8, seed=0), tiny_dataset)
    with pytest.raises(ConfigError, match="requires"):
        run_stage(TrainConfig(stage="adaptive", total_images=8, seed=0), tiny_dataset)


def test_stage_chain_and_determinism(tiny_dataset):
    cfg0 = TrainConfig(stage="base", total_images=64, batch_size=8, seed=3, log_every=2)
    ck0a, hist = run_stage(cfg0, tiny_dataset)
    ck0b, _ = run_stage(cfg0, tiny_dataset)
    from elastigen.persistence import dumps
    assert dumps(ck0a) == dumps(ck0b)
    assert all(math.isfinite(h["g_loss"]) and math.isfinite(h["d_loss"]) for h in hist)

    cfg1 = TrainConfig(stage="multires", total_images=32, batch_size=8, seed=4)
    ck1, _ = run_stage(cfg1, tiny_dataset, init=ck0a)
    assert ck1.metadata["stage"] == "multires"

    cfg2 = TrainConfig(stage="adaptive", total_images=32, batch_size=8, seed=5)
    ck2, hist2 = run_stage(cfg2, tiny_dataset, init=ck1)
    assert ck2.metadata["stage"] == "adaptive"
    assert bool(ck2.tensors["G.sorted_channels"][0])
    # consistency is zero whenever the sampled config is the full config
    for h in hist2:
        if h["config"].startswith(f"k{DESC.num_blocks}:3,3,3,3,3,3,3,3"):
            assert h["consistency"] == 0.0


def test_multires_degenerate_ladder_equals_base_step(tiny_dataset):
    # with a single supported resolution, a multires stage step is the base
    # stage step: same branches, same rng stream, bit-identical weights
    from elastigen.discriminator import DiscriminatorWeights
    from elastigen.generator import ArchDescriptor, GeneratorWeights
    from elastigen.training import build_bundle
    desc = ArchDescriptor(supported_blocks=(4,))
    init = build_bundle(GeneratorWeights(desc, seed=21),
                        DiscriminatorWeights(desc, seed=22), "base", 21)
    outs = {}
    for stage in ("base", "multires"):
        cfg = TrainConfig(stage=stage, total_images=24, batch_size=8, seed=21)
        outs[stage], _ = run_stage(cfg, tiny_dataset, init=init)
    for name in outs["base"].tensors:
        assert np.array_equal(outs["base"].tensors[name],
                              outs["multires"].tensors[name]), name


def test_adaptive_step_requires_sorted_weights(tiny_dataset):
    from elastigen.discriminator import DiscriminatorWeights
    from elastigen.generator import GeneratorWeights
    from elastigen.training import Adam, TrainState, train_step_adaptive
    g = GeneratorWeights(DESC, seed=5)
    d = DiscriminatorWeights(DESC, seed=6)
    state = TrainState(gweights=g, dweights=d,
                       g_opt=Adam(g.trainable(), 1e-3),
                       d_opt=Adam(d.trainable(), 1e-3))
    cfg = TrainConfig(stage="adaptive", total_images=8, batch_size=8, seed=7)
    with pytest.raises(ConfigError, match="sort"):
        train_step_adaptive(state, cfg, tiny_dataset.images[:8], np.random.default_rng(0), 0)


def test_multires_resolution_frequencies():
    rng = np.random.default_rng(11)
    from elastigen.training import _branches_for_step
    cfg = TrainConfig(stage="multires", total_images=8, seed=0)
    counts = {k: 0 for k in DESC.supported_blocks}
    for _ in range(200):
        for b in _branches_for_step(cfg, DESC, rng):
            counts[b.res_block] += 1
    # with two supported blocks and two draws per iter, both appear each time
    assert counts[3] == 200 and counts[4] == 200
