"""The elastic generator: style mapping, synthesis blocks with magnitude-sorted
channel slicing, per-resolution RGB heads, and the analytical MAC cost model.

One set of weights serves every sub-network: a sub-network is chosen by a
resolution block index and per-layer channel ratios, and always uses the
leading (highest-magnitude, after one-time sorting) slice of each kernel.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from elastigen.tensor import (
    Tensor, add, dense, leaky_relu, modulated_conv2d, mul, narrow, no_grad,
    pixel_norm, recording, reshape, upsample2x,
)

ALLOWED_RATIOS = (0.25, 0.5, 0.75, 1.0)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchDescriptor:
    base_resolution: int = 4
    num_blocks: int = 4
    full_channels: tuple[int, ...] = (64, 64, 32, 16)
    style_dim: int = 64
    z_dim: int = 64
    supported_blocks: tuple[int, ...] = (3, 4)  # top blocks usable as outputs
    mapping_layers: int = 4

    def __post_init__(self):
        if len(self.full_channels) != self.num_blocks:
            raise ConfigError("full_channels length must equal num_blocks")
        if any(c % 4 for c in self.full_channels):
            raise ConfigError("every channel count must be divisible by 4")
        if any(not (1 <= k <= self.num_blocks) for k in self.supported_blocks):
            raise ConfigError("supported_blocks out of range")
        if tuple(sorted(self.supported_blocks)) != tuple(self.supported_blocks):
            raise ConfigError("supported_blocks must be ascending")

    @property
    def num_style_rows(self) -> int:
        return 2 * self.num_blocks + 1

    @property
    def num_mod_layers(self) -> int:
        return 2 * self.num_blocks

    @property
    def allowed_ratios(self) -> tuple[float, ...]:
        return ALLOWED_RATIOS

    def block_resolution(self, k: int) -> int:
        return self.base_resolution * 2 ** (k - 1)

    @property
    def max_resolution(self) -> int:
        return self.block_resolution(self.num_blocks)

    @property
    def supported_resolutions(self) -> tuple[int, ...]:
        return tuple(self.block_resolution(k) for k in self.supported_blocks)

    def layer_channels(self, layer: int) -> tuple[int, int]:
        """(C_in, C_out) at full width for modulated layer index (0-based)."""
        k = layer // 2 + 1
        c_out = self.full_channels[k - 1]
        if layer % 2 == 1:
            c_in = c_out
        else:
            c_in = self.full_channels[k - 2] if k > 1 else self.full_channels[0]
        return c_in, c_out

    def to_metadata(self) -> dict:
        return {
            "base_resolution": self.base_resolution,
            "num_blocks": self.num_blocks,
            "full_channels": list(self.full_channels),
            "style_dim": self.style_dim,
            "z_dim": self.z_dim,
            "num_style_rows": self.num_style_rows,
            "supported_blocks": list(self.supported_blocks),
            "allowed_ratios": list(ALLOWED_RATIOS),
            "mapping_layers": self.mapping_layers,
        }

    @staticmethod
    def from_metadata(meta: dict) -> "ArchDescriptor":
        d = ArchDescriptor(
            base_resolution=meta["base_resolution"],
            num_blocks=meta["num_blocks"],
            full_channels=tuple(meta["full_channels"]),
            style_dim=meta["style_dim"],
            z_dim=meta["z_dim"],
            supported_blocks=tuple(meta["supported_blocks"]),
            mapping_layers=meta.get("mapping_layers", 4),
        )
        if meta.get("num_style_rows", d.num_style_rows) != d.num_style_rows:
            raise ConfigError("metadata num_style_rows inconsistent with num_blocks")
        if tuple(meta.get("allowed_ratios", ALLOWED_RATIOS)) != ALLOWED_RATIOS:
            raise ConfigError("metadata allowed_ratios must be [0.25, 0.5, 0.75, 1.0]")
        return d


# StyleGAN2 config-F at 1024, used by the MAC-model regression tests
CONFIG_F_1024 = ArchDescriptor(
    base_resolution=4, num_blocks=9,
    full_channels=(512, 512, 512, 512, 512, 256, 128, 64, 32),
    style_dim=512, z_dim=512, supported_blocks=(6, 7, 8, 9), mapping_layers=8)


@dataclass(frozen=True)
class SubnetConfig:
    """One executable sub-network: output block + per-layer channel ratios.

    `ratios` covers every modulated layer of the full model; entries for
    layers beyond the output block are carried but inactive.
    """
    res_block: int
    ratios: tuple[float, ...]

    def validate(self, desc: ArchDescriptor) -> "SubnetConfig":
        if not 1 <= self.res_block <= desc.num_blocks:
            raise ConfigError(f"res_block {self.res_block} outside 1..{desc.num_blocks}")
        if len(self.ratios) != desc.num_mod_layers:
            raise ConfigError(
                f"need {desc.num_mod_layers} ratios, got {len(self.ratios)}")
        for i, r in enumerate(self.ratios):
            if r not in ALLOWED_RATIOS:
                raise ConfigError(f"ratio {r} at layer {i} not in {ALLOWED_RATIOS}")
        return self

    @property
    def active_layers(self) -> int:
        return 2 * self.res_block

    def is_full(self, desc: ArchDescriptor) -> bool:
        return self.res_block == desc.num_blocks and all(
            r == 1.0 for r in self.ratios[:self.active_layers])

    def digest(self) -> str:
        genes = ",".join(str(ALLOWED_RATIOS.index(r)) for r in self.ratios)
        return f"k{self.res_block}:{genes}"


def make_config(res_block: int, ratios, desc: ArchDescriptor) -> SubnetConfig:
    """Canonical constructor: ratios beyond the output block are inactive and
    normalized to 1.0 so equal sub-networks compare equal."""
    ratios = list(ratios)
    for layer in range(2 * res_block, desc.num_mod_layers):
        ratios[layer] = 1.0
    return SubnetConfig(res_block, tuple(ratios)).validate(desc)


def full_config(desc: ArchDescriptor) -> SubnetConfig:
    return SubnetConfig(desc.num_blocks, (1.0,) * desc.num_mod_layers)


def smallest_config(desc: ArchDescriptor) -> SubnetConfig:
    return make_config(min(desc.supported_blocks), (0.25,) * desc.num_mod_layers, desc)


def uniform_config(desc: ArchDescriptor, ratio: float, res_block: int | None = None) -> SubnetConfig:
    k = desc.num_blocks if res_block is None else res_block
    return make_config(k, (ratio,) * desc.num_mod_layers, desc)


@dataclass
class WPlus:
    """Extended latent: one style row per modulated layer plus the RGB head row."""
    rows: np.ndarray  # [num_style_rows, style_dim]

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2:
            raise ConfigError(f"WPlus rows must be 2-D, got {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise ConfigError("WPlus rows must be finite")

    def copy(self) -> "WPlus":
        return WPlus(self.rows.copy())

    def digest(self) -> str:
        return hashlib.sha256(self.rows.tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# weights

def _he_scale(fan_in: int) -> float:
    return 1.0 / np.sqrt(fan_in)


_ACT_GAIN = float(np.sqrt(2.0))  # keeps activation magnitude through leaky_relu


def act(x: Tensor) -> Tensor:
    return mul(leaky_relu(x), _ACT_GAIN)


class GeneratorWeights:
    """Named parameter store. All tensors live in `params`; runtime weight
    scaling (equalized learning rate) is applied in forward passes."""

    MAPPING_LR_MUL = 0.01

    def __init__(self, desc: ArchDescriptor, seed: int = 0, dtype=np.float32):
        self.desc = desc
        self.dtype = np.dtype(dtype)
        self.sorted_channels = False
        self.params: dict[str, Tensor] = {}
        self._frozen = False
        self._plans: dict[SubnetConfig, "_InferencePlan"] = {}
        rng = np.random.default_rng(seed)

        def p(name, shape, init="normal"):
            if init == "normal":
                arr = rng.standard_normal(shape)
            elif init == "zeros":
                arr = np.zeros(shape)
            elif init == "ones":
                arr = np.ones(shape)
            else:
                raise AssertionError(init)
            self.params[name] = Tensor(arr, dtype=self.dtype, requires_grad=True)

        d = desc
        p("const", (1, d.full_channels[0], d.base_resolution, d.base_resolution))
        for i in range(d.mapping_layers):
            # init scaled up by 1/lr_mul to cancel the runtime multiplier,
            # so only the effective step size shrinks, not the activations
            p(f"mapping.{i}.w", (d.style_dim, d.z_dim if i == 0 else d.style_dim))
            self.params[f"mapping.{i}.w"] = Tensor(
                self.params[f"mapping.{i}.w"].numpy() / self.MAPPING_LR_MUL,
                dtype=self.dtype, requires_grad=True)
            p(f"mapping.{i}.b", (d.style_dim,), "zeros")
        for layer in range(d.num_mod_layers):
            c_in, c_out = d.layer_channels(layer)
            p(f"layer.{layer}.w", (c_out, c_in, 3, 3))
            p(f"layer.{layer}.b", (1, c_out, 1, 1), "zeros")
            p(f"layer.{layer}.style.w", (c_in, d.style_dim))
            p(f"layer.{layer}.style.b", (c_in,), "ones")
            p(f"layer.{layer}.noise_gain", (), "zeros")
        for k in range(1, d.num_blocks + 1):
            ck = d.full_channels[k - 1]
            p(f"trgb.{k}.w", (3, ck, 1, 1))
            p(f"trgb.{k}.b", (1, 3, 1, 1), "zeros")
            p(f"trgb.{k}.style.w", (ck, d.style_dim))
            p(f"trgb.{k}.style.b", (ck,), "ones")
        self.w_avg = np.zeros(d.style_dim, dtype=self.dtype)

    def trainable(self) -> dict[str, Tensor]:
        if self._frozen:
            raise ConfigError("frozen weights cannot be trained")
        return self.params

    def lr_multiplier(self, name: str) -> float:
        return self.MAPPING_LR_MUL if name.startswith("mapping.") else 1.0

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def freeze(self) -> "GeneratorWeights":
        """Mark immutable, enabling cached per-config inference plans."""
        self._frozen = True
        self.set_requires_grad(False)
        return self

    def plan_for(self, config: SubnetConfig) -> "_InferencePlan | None":
        if not self._frozen:
            return None
        plan = self._plans.get(config)
        if plan is None:
            plan = _InferencePlan(self, config)
            if len(self._plans) > 64:
                self._plans.clear()
            self._plans[config] = plan
        return plan

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {name: t.numpy() for name, t in self.params.items()}
        out["w_avg"] = self.w_avg
        out["sorted_channels"] = np.asarray([1.0 if self.sorted_channels else 0.0],
                                            dtype=np.float32)
        return out

    @staticmethod
    def from_state(desc: ArchDescriptor, tensors: dict[str, np.ndarray],
                   prefix: str = "") -> "GeneratorWeights":
        w = GeneratorWeights(desc, seed=0)
        for name in w.params:
            key = prefix + name
            if key not in tensors:
                raise ConfigError(f"checkpoint missing tensor {key!r}")
            if tensors[key].shape != w.params[name].shape:
                raise ConfigError(f"tensor {key!r} has shape {tensors[key].shape}, "
                                  f"expected {w.params[name].shape}")
            w.params[name] = Tensor(tensors[key].copy(), dtype=w.dtype, requires_grad=True)
        w.w_avg = np.asarray(tensors[prefix + "w_avg"], dtype=w.dtype).copy()
        w.sorted_channels = bool(tensors.get(prefix + "sorted_channels", [0.0])[0])
        return w


# ---------------------------------------------------------------------------
# forward passes

def mapping_batch(z: np.ndarray, weights: GeneratorWeights, psi: float = 1.0) -> Tensor:
    """z [N, z_dim] -> w [N, style_dim], truncated toward the running mean."""
    if not 0.0 <= psi <= 1.0:
        raise ConfigError(f"truncation psi must be in [0, 1], got {psi}")
    if not np.all(np.isfinite(z)):
        raise ConfigError("z must be finite")
    d = weights.desc
    h = pixel_norm(Tensor(np.asarray(z, dtype=weights.dtype).reshape(-1, d.z_dim)))
    lrm = weights.MAPPING_LR_MUL
    for i in range(d.mapping_layers):
        w = weights.params[f"mapping.{i}.w"]
        b = weights.params[f"mapping.{i}.b"]
        fan_in = w.shape[1]
        h = dense(h, mul(w, _he_scale(fan_in) * lrm), mul(b, lrm))
        h = act(h)
    if psi != 1.0:
        avg = Tensor(weights.w_avg.reshape(1, -1), dtype=weights.dtype)
        h = add(avg, mul(add(h, mul(avg, -1.0)), psi))
    return h


def mapping(z: np.ndarray, psi: float, weights: GeneratorWeights) -> WPlus:
    """Single latent -> WPlus with the mapped style broadcast to every row."""
    with no_grad():
        w = mapping_batch(np.asarray(z).reshape(1, -1), weights, psi=psi)
    rows = np.repeat(w.numpy(), weights.desc.num_style_rows, axis=0)
    return WPlus(rows)


def _ratio_count(c: int, ratio: float) -> int:
    n = int(round(ratio * c))
    assert n == ratio * c, "channel counts must stay integral (divisible by 4)"
    return n


_noise_cache: dict[tuple, np.ndarray] = {}


def _layer_noise(desc: ArchDescriptor, layer: int, res: int, noise_seed: int,
                 dtype) -> np.ndarray:
    # deterministic per (seed, layer, res); cached because interactive
    # rendering reuses one session seed for every preview
    key = (noise_seed, layer, res, np.dtype(dtype).name)
    out = _noise_cache.get(key)
    if out is None:
        rng = np.random.default_rng([noise_seed, layer])
        out = rng.standard_normal((1, 1, res, res)).astype(dtype)
        if len(_noise_cache) > 4096:
            _noise_cache.clear()
        _noise_cache[key] = out
    return out


class _InferencePlan:
    """Per-config sliced and scaled weight tensors for frozen weights.

    Snapshot weights never change, so the slice/scale work and the Tensor
    wrappers are hoisted out of the per-render loop. The stored arrays are
    produced by exactly the expressions the unplanned fast path evaluates,
    keeping outputs bit-identical.
    """

    def __init__(self, weights: "GeneratorWeights", config: SubnetConfig):
        d = weights.desc
        config.validate(d)
        dtype = weights.dtype
        self.conv_w: list[Tensor] = []
        self.conv_b: list[np.ndarray] = []
        self.style_w: list[Tensor] = []
        self.style_b: list[Tensor] = []
        self.gain: list[np.ndarray] = []
        prev = weights.params["const"].shape[1]
        for layer in range(2 * config.res_block):
            _, c_out_full = d.layer_channels(layer)
            n_out = _ratio_count(c_out_full, config.ratios[layer])
            w = weights.params[f"layer.{layer}.w"].data[:n_out, :prev]
            b = weights.params[f"layer.{layer}.b"].data[:, :n_out]
            sw = weights.params[f"layer.{layer}.style.w"].data[:prev]
            sb = weights.params[f"layer.{layer}.style.b"].data[:prev]
            self.conv_w.append(Tensor(w * dtype.type(_he_scale(prev * 9))))
            self.conv_b.append(b)
            self.style_w.append(Tensor(sw * dtype.type(_he_scale(sw.shape[1]))))
            self.style_b.append(Tensor(sb))
            self.gain.append(weights.params[f"layer.{layer}.noise_gain"].data)
            prev = n_out
        self.rgb: dict[int, tuple[Tensor, np.ndarray, Tensor, Tensor]] = {}
        prev = weights.params["const"].shape[1]
        for k in range(1, config.res_block + 1):
            prev = _ratio_count(d.layer_channels(2 * k - 1)[1], config.ratios[2 * k - 1])
            tw = weights.params[f"trgb.{k}.w"].data[:, :prev]
            tb = weights.params[f"trgb.{k}.b"].data
            tsw = weights.params[f"trgb.{k}.style.w"].data[:prev]
            tsb = weights.params[f"trgb.{k}.style.b"].data[:prev]
            self.rgb[k] = (Tensor(tw * dtype.type(_he_scale(prev))), tb,
                           Tensor(tsw * dtype.type(_he_scale(tsw.shape[1]))), Tensor(tsb))


def _narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    # taped slice during training; plain numpy view when not recording
    if recording():
        return narrow(t, axis, start, length)
    idx = tuple(slice(None) if i != axis else slice(start, start + length)
                for i in range(t.data.ndim))
    return Tensor(t.data[idx], dtype=t.dtype)


def _style_for(weights: GeneratorWeights, prefix: str, w_row: Tensor,
               c_in_slice: int | None) -> Tensor:
    sw = weights.params[f"{prefix}.style.w"]
    sb = weights.params[f"{prefix}.style.b"]
    if c_in_slice is not None and c_in_slice < sw.shape[0]:
        sw = _narrow(sw, 0, 0, c_in_slice)
        sb = _narrow(sb, 0, 0, c_in_slice)
    fan_in = sw.shape[1]
    return dense(w_row, mul(sw, _he_scale(fan_in)), sb)


def _slice_conv(weights: GeneratorWeights, layer: int, n_in: int, n_out: int):
    w = weights.params[f"layer.{layer}.w"]
    b = weights.params[f"layer.{layer}.b"]
    c_out, c_in = w.shape[0], w.shape[1]
    if n_out < c_out:
        w = _narrow(w, 0, 0, n_out)
        b = _narrow(b, 1, 0, n_out)
    if n_in < c_in:
        w = _narrow(w, 1, 0, n_in)
    return w, b


def synthesize_styles(styles: list[Tensor], config: SubnetConfig,
                      weights: GeneratorWeights, noise_seed: int = 0,
                      intermediates: bool = True):
    """Core synthesis over per-row style tensors (each [N, style_dim]).

    Runs blocks 1..config.res_block, slicing each modulated layer to its
    configured channel ratio; returns (final_rgb, [rgb_block_1..k]).
    """
    d = weights.desc
    config.validate(d)
    if len(styles) != d.num_style_rows:
        raise ConfigError(f"need {d.num_style_rows} style rows, got {len(styles)}")
    if any(r < 1.0 for r in config.ratios[:config.active_layers]) and not weights.sorted_channels:
        raise ConfigError("weights must be channel-sorted before ratios < 1 are used "
                          "(run sort_channels)")
    n = styles[0].shape[0]
    dtype = weights.dtype
    # the taped path and the fast inference branch evaluate the same numpy
    # expressions in the same order, so their outputs are bit-identical
    fast = not recording()
    plan = weights.plan_for(config) if fast else None

    const = weights.params["const"]
    if n > 1:
        x = add(const, Tensor(np.zeros((n, 1, 1, 1)), dtype=dtype))
    else:
        x = const
    prev_channels = const.shape[1]
    rgbs: list[Tensor] = []
    x_out = None
    for k in range(1, config.res_block + 1):
        res = d.block_resolution(k)
        if k > 1:
            x = upsample2x(x, "bilinear")
        for j in (0, 1):
            layer = 2 * (k - 1) + j
            _, c_out_full = d.layer_channels(layer)
            n_out = _ratio_count(c_out_full, config.ratios[layer])
            n_in = prev_channels
            noise = _layer_noise(d, layer, res, noise_seed, dtype)
            if plan is not None:
                style = dense(styles[layer], plan.style_w[layer], plan.style_b[layer])
                x = modulated_conv2d(x, plan.conv_w[layer], style, demodulate=True)
                y = (x.data + noise * plan.gain[layer]) + plan.conv_b[layer]
                x = Tensor(np.where(y >= 0, y, y * dtype.type(0.2)) * dtype.type(_ACT_GAIN))
            else:
                w, b = _slice_conv(weights, layer, n_in, n_out)
                style = _style_for(weights, f"layer.{layer}", styles[layer], n_in)
                # fan-in from the sliced shape, so an extracted standalone
                # sub-generator reproduces the sliced path bit-exactly
                scale = dtype.type(_he_scale(n_in * 9))
                gain = weights.params[f"layer.{layer}.noise_gain"]
                if fast:
                    x = modulated_conv2d(x, Tensor(w.data * scale), style, demodulate=True)
                    y = (x.data + noise * gain.data) + b.data
                    x = Tensor(np.where(y >= 0, y, y * dtype.type(0.2)) * dtype.type(_ACT_GAIN))
                else:
                    x = modulated_conv2d(x, mul(w, scale), style, demodulate=True)
                    x = add(x, mul(Tensor(noise, dtype=dtype), gain))
                    x = act(add(x, b))
            prev_channels = n_out
        want_rgb = intermediates or k == config.res_block
        if want_rgb:
            if plan is not None:
                tw_t, tb_arr, tsw_t, tsb_t = plan.rgb[k]
                t_style = dense(styles[d.num_mod_layers], tsw_t, tsb_t)
                rgb = modulated_conv2d(x, tw_t, t_style, demodulate=False)
                rgb = Tensor(rgb.data + tb_arr)
            else:
                tw = weights.params[f"trgb.{k}.w"]
                tb = weights.params[f"trgb.{k}.b"]
                if prev_channels < tw.shape[1]:
                    tw = _narrow(tw, 1, 0, prev_channels)
                t_style = _style_for(weights, f"trgb.{k}", styles[d.num_mod_layers],
                                     prev_channels)
                t_scale = dtype.type(_he_scale(prev_channels))
                if fast:
                    rgb = modulated_conv2d(x, Tensor(tw.data * t_scale), t_style,
                                           demodulate=False)
                    rgb = Tensor(rgb.data + tb.data)
                else:
                    rgb = modulated_conv2d(x, mul(tw, t_scale), t_style, demodulate=False)
                    rgb = add(rgb, tb)
            rgbs.append(rgb)
            x_out = rgb
        else:
            rgbs.append(None)
    return x_out, rgbs


def _wplus_styles(wplus: WPlus, desc: ArchDescriptor) -> list[Tensor]:
    if wplus.rows.shape != (desc.num_style_rows, desc.style_dim):
        raise ConfigError(f"WPlus rows {wplus.rows.shape} do not match descriptor "
                          f"({desc.num_style_rows}, {desc.style_dim})")
    return [Tensor(wplus.rows[r:r + 1]) for r in range(desc.num_style_rows)]


def synthesize(wplus: WPlus, config: SubnetConfig, weights: GeneratorWeights,
               noise_seed: int = 0, intermediates: bool = True):
    """Single-image synthesis from a WPlus code.

    Returns (image [1,3,res,res] as numpy, intermediate rgb list). Output is
    unclamped; clamping to display range is a presentation concern.
    """
    with no_grad():
        out, rgbs = synthesize_styles(_wplus_styles(wplus, weights.desc), config,
                                      weights, noise_seed, intermediates)
    return out.numpy(), [r.numpy() if r is not None else None for r in rgbs]


# ---------------------------------------------------------------------------
# channel sorting

def sort_channels(weights: GeneratorWeights) -> GeneratorWeights:
    """Permute each modulated conv's output channels by descending kernel L2
    magnitude, fixing up every consumer; idempotent; full-config output is
    unchanged (up to demodulation float reassociation)."""
    d = weights.desc

    def perm_tensor(name: str, perm: np.ndarray, axis: int):
        t = weights.params[name]
        arr = np.take(t.numpy(), perm, axis=axis)
        weights.params[name] = Tensor(arr, dtype=weights.dtype, requires_grad=True)

    for layer in range(d.num_mod_layers):
        w = weights.params[f"layer.{layer}.w"].numpy()
        norms = np.sqrt((w.astype(np.float64) ** 2).sum(axis=(1, 2, 3)))
        perm = np.argsort(-norms, kind="stable")
        perm_tensor(f"layer.{layer}.w", perm, 0)
        perm_tensor(f"layer.{layer}.b", perm, 1)
        # consumers: the next conv's input side (and its per-input-channel
        # style affine), or the block's RGB head when this is a block tail
        if layer % 2 == 0:
            consumers = [f"layer.{layer + 1}"]
        else:
            k = layer // 2 + 1
            consumers = [f"trgb.{k}"]
            if layer + 1 < d.num_mod_layers:
                consumers.append(f"layer.{layer + 1}")
        for cons in consumers:
            perm_tensor(f"{cons}.w", perm, 1)
            perm_tensor(f"{cons}.style.w", perm, 0)
            perm_tensor(f"{cons}.style.b", perm, 0)
    weights.sorted_channels = True
    return weights


# ---------------------------------------------------------------------------
# MAC cost model

def count_macs(desc: ArchDescriptor, config: SubnetConfig) -> int:
    """Multiply-accumulate count of the deployment path for `config`.

    Convention: conv MACs = H'*W'*C_out*C_in*k^2, dense = in*out; the style
    affines, mapping network and the output block's RGB head are included;
    upsampling, noise and other elementwise work is excluded.
    """
    config.validate(desc)
    total = 0
    # mapping network
    for i in range(desc.mapping_layers):
        total += desc.style_dim * (desc.z_dim if i == 0 else desc.style_dim)
    prev = desc.full_channels[0]
    for k in range(1, config.res_block + 1):
        res = desc.block_resolution(k)
        for j in (0, 1):
            layer = 2 * (k - 1) + j
            _, c_out_full = desc.layer_channels(layer)
            n_out = _ratio_count(c_out_full, config.ratios[layer])
            total += res * res * n_out * prev * 9
            total += desc.style_dim * prev  # style affine
            prev = n_out
    res = desc.block_resolution(config.res_block)
    total += res * res * 3 * prev  # RGB head, 1x1 kernel
    total += desc.style_dim * prev
    return total


# ---------------------------------------------------------------------------
# architecture encoding for the conditioned discriminator

def encode_g_arch(config: SubnetConfig, desc: ArchDescriptor) -> np.ndarray:
    """Flat one-hot-per-layer encoding; inactive layers are all-zero groups."""
    config.validate(desc)
    vec = np.zeros(4 * desc.num_mod_layers, dtype=np.float32)
    for layer in range(config.active_layers):
        idx = ALLOWED_RATIOS.index(config.ratios[layer])
        vec[4 * layer + idx] = 1.0
    return vec


def decode_g_arch(vec: np.ndarray, desc: ArchDescriptor) -> SubnetConfig:
    vec = np.asarray(vec)
    if vec.shape != (4 * desc.num_mod_layers,):
        raise ConfigError(f"g_arch length {vec.shape} != {4 * desc.num_mod_layers}")
    ratios = []
    active = 0
    for layer in range(desc.num_mod_layers):
        group = vec[4 * layer:4 * layer + 4]
        nz = np.nonzero(group)[0]
        if nz.size == 0:
            ratios.append(1.0)  # inactive placeholder, canonicalized below
        elif nz.size == 1 and group[nz[0]] == 1.0:
            ratios.append(ALLOWED_RATIOS[int(nz[0])])
            active = layer + 1
        else:
            raise ConfigError(f"g_arch group {layer} is not one-hot or all-zero")
    if active == 0:
        raise ConfigError("g_arch has no active layers")
    if active % 2:
        raise ConfigError("g_arch active layers do not end on a block boundary")
    return make_config(active // 2, ratios, desc)
