"""Consistency-aware image-to-latent projection and latent editing.

Projection is two-step: an encoder provides the initial extended latent,
then iterative optimization refines it. Both steps can include a
sub-network reconstruction term so the recovered code previews faithfully
at reduced budgets, not just under the full model.

Editing directions are unit style-space vectors fit as linear separators
between attribute-positive and attribute-negative latents; an edit adds a
scaled direction to every latent row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from elastigen.data import Dataset, eval_attribute
from elastigen.generator import (
    ArchDescriptor, ConfigError, GeneratorWeights, SubnetConfig, WPlus,
    act, full_config, mapping, mapping_batch, synthesize_styles,
)
from elastigen.perceptual import consistency_metric
from elastigen.tensor import (
    Tensor, add, backward, conv2d, dense, downsample2x, mul, narrow,
    no_grad, reshape,
)
from elastigen.training import Adam, sample_config


class EncoderWeights:
    """Small conv encoder: stride-2-equivalent stages down to 4x4, then a
    dense head emitting one style row per modulated layer."""

    STAGE_CHANNELS = (32, 64, 64)
    HEAD_HIDDEN = 256

    def __init__(self, desc: ArchDescriptor, seed: int = 2, dtype=np.float32):
        self.desc = desc
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)

        def p(name, shape, init="normal"):
            arr = rng.standard_normal(shape) if init == "normal" else np.zeros(shape)
            self.params[name] = Tensor(arr, dtype=self.dtype, requires_grad=True)

        n_stages = int(np.log2(desc.max_resolution // desc.base_resolution))
        chans = [3] + [self.STAGE_CHANNELS[min(i, len(self.STAGE_CHANNELS) - 1)]
                       for i in range(n_stages)]
        self.n_stages = n_stages
        for i in range(n_stages):
            p(f"conv.{i}.w", (chans[i + 1], chans[i], 3, 3))
            p(f"conv.{i}.b", (1, chans[i + 1], 1, 1), "zeros")
        head_in = chans[-1] * desc.base_resolution ** 2
        p("head.0.w", (self.HEAD_HIDDEN, head_in))
        p("head.0.b", (self.HEAD_HIDDEN,), "zeros")
        p("head.1.w", (desc.num_style_rows * desc.style_dim, self.HEAD_HIDDEN))
        p("head.1.b", (desc.num_style_rows * desc.style_dim,), "zeros")

    def trainable(self) -> dict[str, Tensor]:
        return self.params

    def lr_multiplier(self, name: str) -> float:
        return 1.0

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in self.params.items()}

    @staticmethod
    def from_state(desc: ArchDescriptor, tensors: dict[str, np.ndarray],
                   prefix: str = "") -> "EncoderWeights":
        w = EncoderWeights(desc, seed=0)
        for name in w.params:
            key = prefix + name
            if key not in tensors:
                raise ConfigError(f"checkpoint missing tensor {key!r}")
            w.params[name] = Tensor(tensors[key].copy(), dtype=w.dtype, requires_grad=True)
        return w


def _he(fan_in: int) -> float:
    return 1.0 / np.sqrt(fan_in)


def encode_batch(images: Tensor, enc: EncoderWeights) -> Tensor:
    """images [N,3,R,R] -> latent rows [N, num_style_rows, style_dim]."""
    d = enc.desc
    if images.shape[2] != d.max_resolution or images.shape[3] != d.max_resolution:
        raise ConfigError(
            f"encoder expects {d.max_resolution}x{d.max_resolution} images, "
            f"got {images.shape}")
    x = images
    for i in range(enc.n_stages):
        w = enc.params[f"conv.{i}.w"]
        b = enc.params[f"conv.{i}.b"]
        x = act(add(conv2d(x, mul(w, _he(w.shape[1] * 9)), pad=1), b))
        x = downsample2x(x)
    h = dense(x, mul(enc.params["head.0.w"], _he(enc.params["head.0.w"].shape[1])),
              enc.params["head.0.b"])
    h = act(h)
    out = dense(h, mul(enc.params["head.1.w"], _he(enc.HEAD_HIDDEN)),
                enc.params["head.1.b"])
    return reshape(out, (images.shape[0], d.num_style_rows, d.style_dim))


def encode(image: np.ndarray, enc: EncoderWeights) -> WPlus:
    """Deterministic single forward pass -> WPlus."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    with no_grad():
        rows = encode_batch(Tensor(arr), enc).numpy()[0]
    return WPlus(rows)


def _rows_to_styles(rows: Tensor, desc: ArchDescriptor) -> list[Tensor]:
    n = rows.shape[0]
    return [reshape(narrow(rows, 1, r, 1), (n, desc.style_dim))
            for r in range(desc.num_style_rows)]


def reconstruction_loss(rows: Tensor, target_full: Tensor, config: SubnetConfig,
                        gweights: GeneratorWeights, noise_seed: int) -> Tensor:
    """Consistency metric between the render of `rows` under `config` and the
    full-resolution target image."""
    styles = _rows_to_styles(rows, gweights.desc)
    out, _ = synthesize_styles(styles, config, gweights, noise_seed=noise_seed,
                               intermediates=False)
    return consistency_metric(out, target_full)


# ---------------------------------------------------------------------------
# encoder training

@dataclass
class EncoderTrainConfig:
    epochs: int = 4
    batch_size: int = 8
    lr: float = 1e-3
    consistency: bool = True
    alpha: float = 1.0
    seed: int = 0
    generated_fraction: float = 0.5
    log_every: int = 50


def train_encoder(dataset: Dataset, gweights: GeneratorWeights,
                  cfg: EncoderTrainConfig) -> tuple[EncoderWeights, list[dict]]:
    """Minimize full reconstruction, plus the sampled-sub-network term when
    consistency is on. Batches mix dataset images with fresh generator
    samples; horizontal flip augmentation on dataset images."""
    desc = gweights.desc
    enc = EncoderWeights(desc, seed=cfg.seed + 11)
    opt = Adam(enc.trainable(), cfg.lr, lr_multiplier=enc.lr_multiplier)
    rng = np.random.default_rng(cfg.seed)
    gweights.set_requires_grad(False)
    history: list[dict] = []
    steps_per_epoch = max(1, len(dataset) // cfg.batch_size)
    step = 0
    for _ in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            n_gen = int(round(cfg.batch_size * cfg.generated_fraction))
            n_data = cfg.batch_size - n_gen
            imgs = []
            if n_data:
                idx = rng.integers(0, len(dataset), size=n_data)
                batch = dataset.images[idx].copy()
                flips = rng.random(n_data) < 0.5
                batch[flips] = batch[flips][:, :, :, ::-1]
                imgs.append(batch)
            if n_gen:
                z = rng.standard_normal((n_gen, desc.z_dim)).astype(np.float32)
                with no_grad():
                    w = mapping_batch(z, gweights)
                    gen, _ = synthesize_styles([w] * desc.num_style_rows,
                                               full_config(desc), gweights,
                                               noise_seed=step, intermediates=False)
                imgs.append(gen.numpy())
            batch = np.concatenate(imgs, axis=0).astype(np.float32)
            target = Tensor(batch)
            rows = encode_batch(target, enc)
            full_term = reconstruction_loss(rows, target, full_config(desc),
                                            gweights, noise_seed=step)
            loss = full_term
            sub_value = 0.0
            if cfg.consistency and cfg.alpha > 0:
                config = sample_config(rng, "flexible", desc)
                sub_term = reconstruction_loss(rows, target, config, gweights,
                                               noise_seed=step)
                sub_value = float(sub_term.numpy())
                loss = add(loss, mul(sub_term, cfg.alpha))
            opt.zero_grad()
            backward(loss)
            opt.step()
            if step % cfg.log_every == 0:
                history.append({"step": step, "full_loss": float(full_term.numpy()),
                                "sub_loss": sub_value})
            step += 1
    gweights.set_requires_grad(True)
    return enc, history


# ---------------------------------------------------------------------------
# latent optimization

@dataclass
class ProjectionConfig:
    alpha: float = 1.0
    iterations: int = 100
    sub_samples_per_step: int = 1
    optimizer: str = "lbfgs"  # lbfgs | adam
    seed: int = 0
    history: int = 10
    noise_seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.optimizer not in ("lbfgs", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class ProjectionResult:
    wplus: WPlus
    trace: list[float] = field(default_factory=list)
    best_loss: float = 0.0
    diverged: bool = False


def _objective(flat: np.ndarray, target: Tensor, configs: list[SubnetConfig],
               gweights: GeneratorWeights, alpha: float, noise_seed: int,
               need_grad: bool) -> tuple[float, np.ndarray | None]:
    desc = gweights.desc
    rows = Tensor(flat.reshape(desc.num_style_rows, desc.style_dim)[None],
                  requires_grad=need_grad)
    def build():
        loss = reconstruction_loss(rows, target, full_config(desc), gweights, noise_seed)
        if alpha > 0 and configs:
            for cfg in configs:
                loss = add(loss, mul(
                    reconstruction_loss(rows, target, cfg, gweights, noise_seed),
                    alpha / len(configs)))
        return loss
    if not need_grad:
        with no_grad():
            return float(build().numpy()), None
    loss = build()
    value = float(loss.numpy())
    backward(loss)
    grad = np.zeros(flat.shape, dtype=np.float64) if rows.grad is None else \
        rows.grad.numpy().astype(np.float64).reshape(-1)
    return value, grad


def optimize_latent(image: np.ndarray, init: WPlus, config: ProjectionConfig,
                    gweights: GeneratorWeights) -> ProjectionResult:
    """Iterative refinement from `init`; returns the best code seen.

    lbfgs mode keeps a bounded two-loop history with Armijo backtracking;
    the sub-network expectation is re-sampled every iteration.
    """
    desc = gweights.desc
    if init.rows.shape != (desc.num_style_rows, desc.style_dim):
        raise ConfigError("init does not match the generator descriptor")
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    target = Tensor(arr)
    rng = np.random.default_rng(config.seed)
    gweights.set_requires_grad(False)

    x = init.rows.astype(np.float64).reshape(-1).copy()
    best_x = x.copy()
    trace: list[float] = []
    best = np.inf
    diverged = False

    def sample_cfgs():
        if config.alpha <= 0:
            return []
        return [sample_config(rng, "flexible", desc)
                for _ in range(config.sub_samples_per_step)]

    if config.optimizer == "adam":
        rows_t = Tensor(init.rows.copy()[None], requires_grad=True)
        opt = Adam({"rows": rows_t}, lr=0.02)
        for it in range(config.iterations):
            cfgs = sample_cfgs()
            loss = reconstruction_loss(rows_t, target, full_config(desc), gweights,
                                       config.noise_seed)
            for c in cfgs:
                loss = add(loss, mul(reconstruction_loss(
                    rows_t, target, c, gweights, config.noise_seed),
                    config.alpha / len(cfgs)))
            value = float(loss.numpy())
            if not np.isfinite(value):
                diverged = True
                break
            trace.append(value)
            if value < best:
                best, best_x = value, rows_t.numpy().astype(np.float64).reshape(-1).copy()
            opt.zero_grad()
            backward(loss)
            opt.step()
        gweights.set_requires_grad(True)
        return ProjectionResult(WPlus(best_x.reshape(desc.num_style_rows, desc.style_dim)
                                      .astype(np.float32)),
                                trace, best, diverged)

    # L-BFGS with bounded history and Armijo backtracking
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    for it in range(config.iterations):
        cfgs = sample_cfgs()
        f0, g0 = _objective(x, target, cfgs, gweights, config.alpha,
                            config.noise_seed, need_grad=True)
        if not np.isfinite(f0) or not np.all(np.isfinite(g0)):
            diverged = True
            break
        trace.append(f0)
        if f0 < best:
            best, best_x = f0, x.copy()
        if f0 == 0.0:
            break
        # two-loop recursion
        q = g0.copy()
        alphas = []
        for s, y in reversed(list(zip(s_hist, y_hist))):
            rho = 1.0 / float(y @ s)
            a = rho * float(s @ q)
            alphas.append((a, rho, s, y))
            q -= a * y
        if y_hist:
            y_last, s_last = y_hist[-1], s_hist[-1]
            q *= float(s_last @ y_last) / float(y_last @ y_last)
        for a, rho, s, y in reversed(alphas):
            b = rho * float(y @ q)
            q += s * (a - b)
        direction = -q
        if float(direction @ g0) >= 0:
            direction = -g0
        # backtracking line search on this iteration's sampled objective
        step_len = 1.0
        accepted = False
        f_new = f0
        for _ in range(12):
            x_try = x + step_len * direction
            f_try, _ = _objective(x_try, target, cfgs, gweights, config.alpha,
                                  config.noise_seed, need_grad=False)
            if np.isfinite(f_try) and f_try <= f0 + 1e-4 * step_len * float(direction @ g0):
                accepted = True
                f_new = f_try
                break
            step_len *= 0.5
        if not accepted:
            s_hist.clear()
            y_hist.clear()
            continue
        x_new = x + step_len * direction
        # curvature pair on the same sampled objective
        _, g_new = _objective(x_new, target, cfgs, gweights, config.alpha,
                              config.noise_seed, need_grad=True)
        s = x_new - x
        y = g_new - g0
        if float(y @ s) > 1e-12:
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > config.history:
                s_hist.pop(0)
                y_hist.pop(0)
        x = x_new
        if f_new < best:
            best, best_x = f_new, x.copy()
    gweights.set_requires_grad(True)
    return ProjectionResult(WPlus(best_x.reshape(desc.num_style_rows, desc.style_dim)
                                  .astype(np.float32)),
                            trace, best, diverged)


def project(image: np.ndarray, enc: EncoderWeights, gweights: GeneratorWeights,
            config: ProjectionConfig) -> ProjectionResult:
    """Encoder initialization followed by latent optimization."""
    return optimize_latent(image, encode(image, enc), config, gweights)


# ---------------------------------------------------------------------------
# editing directions

@dataclass(frozen=True)
class EditDirection:
    name: str
    vector: np.ndarray
    magnitude_range: tuple[float, float]

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float32)
        norm = float(np.linalg.norm(v))
        if not 0.999 <= norm <= 1.001:
            raise ConfigError(f"direction {self.name!r} must be unit norm, got {norm}")
        object.__setattr__(self, "vector", v / norm)


class DegenerateLabelsError(ValueError):
    pass


def _fit_logistic(x: np.ndarray, labels: np.ndarray, l2: float = 1e-3,
                  iters: int = 500, lr: float = 0.5):
    """Regularized logistic regression by plain gradient descent."""
    n, dim = x.shape
    w = np.zeros(dim, dtype=np.float64)
    b = 0.0
    y = labels.astype(np.float64)
    for _ in range(iters):
        logits = x @ w + b
        p = 1.0 / (1.0 + np.exp(-logits))
        gw = x.T @ (p - y) / n + l2 * w
        gb = float((p - y).mean())
        w -= lr * gw
        b -= lr * gb
    return w, b


def compute_direction(attribute_name: str, gweights: GeneratorWeights,
                      sample_count: int = 2000, psi: float = 0.7,
                      seed: int = 0, noise_seed: int = 0) -> EditDirection:
    """Fit a linear attribute separator over sampled latents rendered with
    the full generator; the unit normal is the editing direction."""
    desc = gweights.desc
    rng = np.random.default_rng(seed)
    feats = np.zeros((sample_count, desc.style_dim), dtype=np.float64)
    labels = np.zeros(sample_count, dtype=bool)
    batch = 16
    with no_grad():
        for i in range(0, sample_count, batch):
            n = min(batch, sample_count - i)
            z = rng.standard_normal((n, desc.z_dim)).astype(np.float32)
            w = mapping_batch(z, gweights, psi=psi)
            out, _ = synthesize_styles([w] * desc.num_style_rows, full_config(desc),
                                       gweights, noise_seed=noise_seed,
                                       intermediates=False)
            imgs = out.numpy()
            # style rows are identical per sample here, so the row mean is w
            feats[i:i + n] = w.numpy().astype(np.float64)
            for j in range(n):
                labels[i + j] = eval_attribute(imgs[j], attribute_name)[0]
    pos = int(labels.sum())
    if pos == 0 or pos == sample_count:
        raise DegenerateLabelsError(
            f"attribute {attribute_name!r} produced a single class "
            f"({pos}/{sample_count} positive)")
    w_fit, b_fit = _fit_logistic(feats, labels)
    norm = float(np.linalg.norm(w_fit))
    if norm == 0:
        raise DegenerateLabelsError(f"separator for {attribute_name!r} is null")
    unit = (w_fit / norm).astype(np.float32)
    # calibrate the magnitude range from signed distances to the boundary
    dist = feats @ unit.astype(np.float64) + b_fit / norm
    mag = float(np.percentile(np.abs(dist), 90) * 1.25)
    return EditDirection(attribute_name, unit, (-mag, mag))


def separator_accuracy(direction: EditDirection, gweights: GeneratorWeights,
                       attribute_name: str, sample_count: int = 500,
                       psi: float = 0.7, seed: int = 1) -> float:
    """Label-recovery accuracy of the direction's separator on fresh samples."""
    desc = gweights.desc
    rng = np.random.default_rng(seed)
    correct = 0
    with no_grad():
        for i in range(0, sample_count, 16):
            n = min(16, sample_count - i)
            z = rng.standard_normal((n, desc.z_dim)).astype(np.float32)
            w = mapping_batch(z, gweights, psi=psi)
            out, _ = synthesize_styles([w] * desc.num_style_rows, full_config(desc),
                                       gweights, noise_seed=0, intermediates=False)
            proj = w.numpy().astype(np.float64) @ direction.vector.astype(np.float64)
            median = np.median(proj)
            for j in range(n):
                label = eval_attribute(out.numpy()[j], attribute_name)[0]
                correct += (proj[j] > median) == label
    return correct / sample_count


def edit(wplus: WPlus, direction: EditDirection, magnitude: float) -> WPlus:
    """w + magnitude * direction, broadcast across all latent rows."""
    if magnitude == 0.0:
        return wplus.copy()
    rows = wplus.rows + np.float32(magnitude) * direction.vector[None, :]
    return WPlus(rows)
