"""Stage-wise GAN training.

Stage "base" trains the full model at the top resolution only. Stage
"multires" samples two output resolutions per iteration (full channels).
Stage "adaptive" samples channel configurations with the sandwich rule,
conditions the discriminator on the sampled architecture, and adds the
sub-vs-full consistency loss. Channel sorting happens once on entry to the
adaptive stage and never again.

The full-generator target of the consistency term is detached by default:
the full model receives its own adversarial updates through sandwich
sampling, and a live teacher destabilizes joint training at this scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from elastigen import persistence
from elastigen.data import Dataset
from elastigen.discriminator import DiscriminatorWeights, discriminate, sample_real_g_arch
from elastigen.generator import (
    ArchDescriptor, ConfigError, GeneratorWeights, SubnetConfig, encode_g_arch,
    full_config, make_config, mapping_batch, sort_channels, synthesize_styles,
)
from elastigen.perceptual import consistency_metric
from elastigen.tensor import (
    Tensor, add, backward, grad_of, mul, no_grad, softplus, tmean, tsum,
)

STAGES = ("base", "multires", "adaptive")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str, snapshot_path: str | None = None):
        msg = f"non-finite loss at step {step}: {detail}"
        if snapshot_path:
            msg += f" (diagnostic snapshot: {snapshot_path})"
        super().__init__(msg)
        self.step = step
        self.snapshot_path = snapshot_path


@dataclass
class TrainConfig:
    stage: str
    total_images: int
    batch_size: int = 8
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    r1_gamma: float = 10.0
    consistency_weight: float = 1.0
    seed: int = 0
    channel_mode: str = "flexible"  # uniform | flexible
    resolutions_per_iter: int = 2
    r1_interval: int = 16
    detach_teacher: bool = True
    log_every: int = 50
    log_path: str | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.total_images <= 0 or self.batch_size <= 0:
            raise ConfigError("total_images and batch_size must be positive")
        if self.channel_mode not in ("uniform", "flexible"):
            raise ConfigError(f"unknown channel mode {self.channel_mode!r}")


@dataclass
class TrainState:
    gweights: GeneratorWeights
    dweights: DiscriminatorWeights
    g_opt: "Adam"
    d_opt: "Adam"
    images_shown: int = 0
    history: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# config sampling

def sample_config(rng: np.random.Generator, mode: str, desc: ArchDescriptor) -> SubnetConfig:
    """Sandwich rule (flexible) or single uniform ratio for all layers.

    Flexible: 25% full ratios, 25% smallest ratios, otherwise i.i.d. uniform
    per layer. The output resolution is drawn uniformly over the supported
    blocks, independently of the ratios.
    """
    res_block = int(rng.choice(desc.supported_blocks))
    n = desc.num_mod_layers
    if mode == "uniform":
        r = float(rng.choice(desc.allowed_ratios))
        return make_config(res_block, (r,) * n, desc)
    if mode != "flexible":
        raise ConfigError(f"unknown sampling mode {mode!r}")
    u = rng.random()
    if u < 0.25:
        ratios = (1.0,) * n
    elif u < 0.5:
        ratios = (0.25,) * n
    else:
        ratios = tuple(float(rng.choice(desc.allowed_ratios)) for _ in range(n))
    return make_config(res_block, ratios, desc)


# ---------------------------------------------------------------------------
# losses

def gan_losses(d_real_logits: Tensor, d_fake_logits: Tensor) -> tuple[Tensor, Tensor]:
    """Non-saturating logistic losses. Returns (g_loss, d_loss), batch means."""
    d_loss = add(tmean(softplus(mul(d_real_logits, -1.0))), tmean(softplus(d_fake_logits)))
    g_loss = tmean(softplus(mul(d_fake_logits, -1.0)))
    return g_loss, d_loss


def r1_penalty(d_real_logit: Tensor, real_image: Tensor, gamma: float = 10.0) -> float:
    """Exact (gamma/2) * mean_n ||d D / d x_n||^2 via a tape gradient query."""
    if not real_image.requires_grad:
        raise ConfigError("r1_penalty: real_image must require grad")
    gx = grad_of(tsum(d_real_logit), [real_image])[0]
    n = real_image.shape[0]
    per = (gx.astype(np.float64).reshape(n, -1) ** 2).sum(axis=1)
    return float(0.5 * gamma * per.mean())


def _r1_surrogate(d_apply, real: Tensor, logits: Tensor, gamma_eff: float,
                  fd_eps: float = 1e-2) -> tuple[Tensor, float]:
    """Differentiable penalty surrogate.

    The gradient g = dD/dx is produced by a tape query, then the penalty is
    rebuilt as a symmetric finite difference of D along g, which has the
    exact value (up to O(eps^2)) and, crucially, carries d(penalty)/d(theta)
    through two extra forward passes instead of second-order autodiff.
    """
    gx = grad_of(tsum(logits), [real])[0]
    n = real.shape[0]
    rms = float(np.sqrt((gx.astype(np.float64) ** 2).mean())) + 1e-12
    u = (gx / rms).astype(real.dtype)
    lp = d_apply(Tensor(real.numpy() + fd_eps * u, dtype=real.dtype))
    lm = d_apply(Tensor(real.numpy() - fd_eps * u, dtype=real.dtype))
    phi = mul(add(tsum(lp), mul(tsum(lm), -1.0)), rms / (2.0 * fd_eps))
    penalty = mul(phi, 0.5 * gamma_eff / n)
    per = (gx.astype(np.float64).reshape(n, -1) ** 2).sum(axis=1)
    exact = float(0.5 * gamma_eff * per.mean())
    return penalty, exact


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adaptive moment estimation; beta1=0 per the training convention here."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.0, 0.99), eps: float = 1e-8,
                 lr_multiplier=None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.lr_multiplier = lr_multiplier or (lambda name: 1.0)
        self.m = {k: np.zeros(t.shape, dtype=np.float32) for k, t in params.items()}
        self.v = {k: np.zeros(t.shape, dtype=np.float32) for k, t in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.numpy()
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            mhat = self.m[name] / (1 - self.b1 ** self.t)
            vhat = self.v[name] / (1 - self.b2 ** self.t)
            lr = self.lr * self.lr_multiplier(name)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out


# ---------------------------------------------------------------------------
# steps

def _real_at_block(real: np.ndarray, k: int, desc: ArchDescriptor) -> np.ndarray:
    res = desc.block_resolution(k)
    x = real
    while x.shape[2] > res:
        x = x.reshape(x.shape[0], x.shape[1], x.shape[2] // 2, 2, x.shape[3] // 2, 2).mean(axis=(3, 5))
    return x.astype(np.float32)


def _branches_for_step(cfg: TrainConfig, desc: ArchDescriptor,
                       rng: np.random.Generator) -> list[SubnetConfig]:
    if cfg.stage == "base":
        return [full_config(desc)]
    if cfg.stage == "multires":
        blocks = list(desc.supported_blocks)
        n = min(cfg.resolutions_per_iter, len(blocks))
        if n == len(blocks):
            # taking every block needs no draw; keeps a one-resolution ladder
            # bit-identical to the base stage step
            picked = range(n)
        else:
            picked = (int(i) for i in rng.choice(len(blocks), size=n, replace=False))
        return [make_config(blocks[i], (1.0,) * desc.num_mod_layers, desc)
                for i in sorted(picked)]
    return [sample_config(rng, cfg.channel_mode, desc)]


def train_step(state: TrainState, cfg: TrainConfig, real_batch: np.ndarray,
               rng: np.random.Generator, step: int) -> dict:
    """One alternating D-then-G update over the step's sampled branches."""
    desc = state.gweights.desc
    branches = _branches_for_step(cfg, desc, rng)
    z = rng.standard_normal((real_batch.shape[0], desc.z_dim)).astype(np.float32)
    noise_seed = cfg.seed * 1_000_003 + step
    do_r1 = cfg.r1_gamma > 0 and step % cfg.r1_interval == 0
    gamma_eff = cfg.r1_gamma * cfg.r1_interval
    record: dict = {"step": step, "stage": cfg.stage,
                    "config": "+".join(b.digest() for b in branches)}

    # --- discriminator update
    state.gweights.set_requires_grad(False)
    state.dweights.set_requires_grad(True)
    d_total = None
    r1_logged = 0.0
    for config in branches:
        k = config.res_block
        with no_grad():
            w = mapping_batch(z, state.gweights)
            styles = [w] * desc.num_style_rows
            fake, _ = synthesize_styles(styles, config, state.gweights,
                                        noise_seed=noise_seed, intermediates=False)
        g_arch_fake = encode_g_arch(config, desc)
        g_arch_real = sample_real_g_arch(rng, desc, res_block=k,
                                         mode=cfg.channel_mode)
        real_k = _real_at_block(real_batch, k, desc)
        real_t = Tensor(real_k, requires_grad=do_r1)
        d_real = discriminate(real_t, k, g_arch_real, state.dweights)
        d_fake = discriminate(Tensor(fake.numpy()), k, g_arch_fake, state.dweights)
        _, d_loss = gan_losses(d_real, d_fake)
        if do_r1:
            pen, exact = _r1_surrogate(
                lambda img, kk=k, ga=g_arch_real: discriminate(img, kk, ga, state.dweights),
                real_t, d_real, gamma_eff)
            d_loss = add(d_loss, pen)
            r1_logged += exact
        d_total = d_loss if d_total is None else add(d_total, d_loss)
    d_total = mul(d_total, 1.0 / len(branches))
    d_value = float(d_total.numpy())
    if not math.isfinite(d_value):
        raise TrainingDiverged(step, f"d_loss={d_value}")
    state.d_opt.zero_grad()
    backward(d_total)
    state.d_opt.step()

    # --- generator update
    state.gweights.set_requires_grad(True)
    state.dweights.set_requires_grad(False)
    g_total = None
    consistency_logged = None
    for config in branches:
        k = config.res_block
        w = mapping_batch(z, state.gweights)
        styles = [w] * desc.num_style_rows
        fake, _ = synthesize_styles(styles, config, state.gweights,
                                    noise_seed=noise_seed, intermediates=False)
        g_arch_fake = encode_g_arch(config, desc)
        d_fake = discriminate(fake, k, g_arch_fake, state.dweights)
        g_loss = tmean(softplus(mul(d_fake, -1.0)))
        if cfg.stage == "adaptive" and cfg.consistency_weight > 0 and not config.is_full(desc):
            if cfg.detach_teacher:
                with no_grad():
                    w_t = mapping_batch(z, state.gweights)
                    full_out, _ = synthesize_styles(
                        [w_t] * desc.num_style_rows, full_config(desc),
                        state.gweights, noise_seed=noise_seed, intermediates=False)
                target = Tensor(full_out.numpy())
            else:
                target, _ = synthesize_styles(
                    [w] * desc.num_style_rows, full_config(desc),
                    state.gweights, noise_seed=noise_seed, intermediates=False)
            cons = consistency_metric(fake, target)
            consistency_logged = float(cons.numpy())
            g_loss = add(g_loss, mul(cons, cfg.consistency_weight))
        elif cfg.stage == "adaptive" and config.is_full(desc):
            consistency_logged = 0.0
        g_total = g_loss if g_total is None else add(g_total, g_loss)
        with no_grad():
            batch_mean = w.numpy().mean(axis=0)
        state.gweights.w_avg = (batch_mean + 0.995 * (state.gweights.w_avg - batch_mean)
                                ).astype(state.gweights.dtype)
    g_total = mul(g_total, 1.0 / len(branches))
    g_value = float(g_total.numpy())
    if not math.isfinite(g_value):
        raise TrainingDiverged(step, f"g_loss={g_value}")
    state.g_opt.zero_grad()
    backward(g_total)
    state.g_opt.step()
    state.dweights.set_requires_grad(True)

    state.images_shown += real_batch.shape[0]
    record.update(g_loss=g_value, d_loss=d_value, r1=r1_logged,
                  consistency=consistency_logged)
    return record


# kept as named entry points for the two sampled-stage flavors
def train_step_multires(state: TrainState, cfg: TrainConfig, real_batch, rng, step):
    if cfg.stage not in ("multires", "adaptive"):
        raise ConfigError("train_step_multires requires stage >= multires")
    return train_step(state, cfg, real_batch, rng, step)


def train_step_adaptive(state: TrainState, cfg: TrainConfig, real_batch, rng, step):
    if cfg.stage != "adaptive":
        raise ConfigError("train_step_adaptive requires the adaptive stage")
    if not state.gweights.sorted_channels:
        raise ConfigError("adaptive training requires channel-sorted weights")
    return train_step(state, cfg, real_batch, rng, step)


# ---------------------------------------------------------------------------
# stage runner

def _log_line(record: dict) -> str:
    cons = record.get("consistency")
    cons_s = "nan" if cons is None else f"{cons:.6f}"
    return (f"step={record['step']} stage={record['stage']} config={record['config']} "
            f"g_loss={record['g_loss']:.6f} d_loss={record['d_loss']:.6f} "
            f"consistency={cons_s}")


def build_bundle(gweights: GeneratorWeights, dweights: DiscriminatorWeights,
                 stage: str, seed: int, extra_meta: dict | None = None) -> persistence.CheckpointBundle:
    meta = {
        "kind": "train",
        "stage": stage,
        "seed": seed,
        "descriptor": gweights.desc.to_metadata(),
        "directions": {},
        "budget_ladder": [],
    }
    if extra_meta:
        meta.update(extra_meta)
    bundle = persistence.CheckpointBundle(metadata=meta)
    for name, arr in gweights.state_tensors().items():
        bundle.put(f"G.{name}", arr)
    for name, arr in dweights.state_tensors().items():
        bundle.put(f"D.{name}", arr)
    return bundle


def load_train_bundle(bundle: persistence.CheckpointBundle):
    desc = ArchDescriptor.from_metadata(bundle.metadata["descriptor"])
    g = GeneratorWeights.from_state(desc, bundle.tensors, prefix="G.")
    d = DiscriminatorWeights.from_state(desc, bundle.tensors, prefix="D.")
    return desc, g, d


def run_stage(cfg: TrainConfig, dataset: Dataset,
              init: persistence.CheckpointBundle | None = None,
              desc: ArchDescriptor | None = None) -> tuple[persistence.CheckpointBundle, list[dict]]:
    """Run one training stage to completion; deterministic given cfg.seed.

    Returns (checkpoint bundle, metric history). Entering the adaptive stage
    applies the one-time channel sort.
    """
    prerequisites = {"base": None, "multires": "base", "adaptive": "multires"}
    need = prerequisites[cfg.stage]
    if need is not None:
        if init is None:
            raise ConfigError(f"stage {cfg.stage!r} requires a {need!r} checkpoint")
        init_stage = init.metadata.get("stage")
        order = {s: i for i, s in enumerate(STAGES)}
        if init_stage not in order or order[init_stage] < order[need]:
            raise ConfigError(
                f"stage {cfg.stage!r} requires at least a {need!r} checkpoint, "
                f"got {init_stage!r}")
    if init is not None:
        desc_l, gweights, dweights = load_train_bundle(init)
        if desc is not None and desc != desc_l:
            raise ConfigError("descriptor does not match the init checkpoint")
        desc = desc_l
    else:
        desc = desc or ArchDescriptor()
        gweights = GeneratorWeights(desc, seed=cfg.seed)
        dweights = DiscriminatorWeights(desc, seed=cfg.seed + 1)
    if dataset.spec.resolution != desc.max_resolution:
        raise ConfigError(
            f"dataset resolution {dataset.spec.resolution} != generator "
            f"max resolution {desc.max_resolution}")

    if cfg.stage == "adaptive" and not gweights.sorted_channels:
        sort_channels(gweights)

    state = TrainState(
        gweights=gweights, dweights=dweights,
        g_opt=Adam(gweights.trainable(), cfg.lr_g, lr_multiplier=gweights.lr_multiplier),
        d_opt=Adam(dweights.trainable(), cfg.lr_d, lr_multiplier=dweights.lr_multiplier),
    )
    rng = np.random.default_rng(cfg.seed)
    steps = max(1, cfg.total_images // cfg.batch_size)
    log_f = open(cfg.log_path, "a", encoding="utf-8") if cfg.log_path else None
    try:
        for step in range(steps):
            idx = rng.integers(0, len(dataset), size=cfg.batch_size)
            real = dataset.images[idx].astype(np.float32)
            stepper = {"base": train_step, "multires": train_step_multires,
                       "adaptive": train_step_adaptive}[cfg.stage]
            try:
                record = stepper(state, cfg, real, rng, step)
            except TrainingDiverged as e:
                snap = None
                if cfg.log_path:
                    snap = cfg.log_path + f".diverged-{e.step}.ckpt"
                    persistence.save(build_bundle(gweights, dweights, cfg.stage, cfg.seed), snap)
                raise TrainingDiverged(e.step, str(e), snap) from e
            if step % cfg.log_every == 0 or step == steps - 1:
                state.history.append(record)
                if log_f:
                    log_f.write(_log_line(record) + "\n")
                    log_f.flush()
    finally:
        if log_f:
            log_f.close()
    bundle = build_bundle(gweights, dweights, cfg.stage, cfg.seed,
                          extra_meta={"train_config": asdict(cfg),
                                      "images_shown": state.images_shown})
    return bundle, state.history
