"""Multi-resolution discriminator with per-resolution RGB entry points and
generator-architecture-conditioned feature modulation on its last two stages.

Images enter at the stage matching their resolution through a 1x1 fromRGB
conv, then flow down to 4x4 and a dense head. The one-hot architecture
vector of the generator that produced (or is imagined to have produced) the
image modulates the two deepest stages: feat <- feat * (1 + scale) + bias,
with zero-initialized affines so conditioning starts as the identity.
"""

from __future__ import annotations

import numpy as np

from elastigen.tensor import (
    Tensor, TensorError, add, conv2d, dense, downsample2x, mul, narrow,
    reshape,
)
from elastigen.generator import (
    ArchDescriptor, ConfigError, act, encode_g_arch, make_config,
)

_HEAD_HIDDEN = 128
_COND_STAGES = 2  # deepest stages receiving g_arch modulation


class DiscriminatorWeights:
    def __init__(self, desc: ArchDescriptor, seed: int = 1, dtype=np.float32):
        self.desc = desc
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)

        def p(name, shape, init="normal"):
            arr = rng.standard_normal(shape) if init == "normal" else np.zeros(shape)
            self.params[name] = Tensor(arr, dtype=self.dtype, requires_grad=True)

        d = desc
        for k in d.supported_blocks:
            p(f"frgb.{k}.w", (d.full_channels[k - 1], 3, 1, 1))
            p(f"frgb.{k}.b", (1, d.full_channels[k - 1], 1, 1), "zeros")
        # stage j runs at block-j resolution, mapping C_j -> C_{j-1} (j > 1)
        for j in range(d.num_blocks, 0, -1):
            c_in = d.full_channels[j - 1]
            c_out = d.full_channels[j - 2] if j > 1 else d.full_channels[0]
            p(f"stage.{j}.w", (c_out, c_in, 3, 3))
            p(f"stage.{j}.b", (1, c_out, 1, 1), "zeros")
        garch_len = 4 * d.num_mod_layers
        for j in range(1, _COND_STAGES + 1):
            c = d.full_channels[j - 1]
            p(f"cond.{j}.w", (2 * c, garch_len), "zeros")
            p(f"cond.{j}.b", (2 * c,), "zeros")
        head_in = d.full_channels[0] * d.base_resolution ** 2
        p("head.0.w", (_HEAD_HIDDEN, head_in))
        p("head.0.b", (_HEAD_HIDDEN,), "zeros")
        p("head.1.w", (1, _HEAD_HIDDEN))
        p("head.1.b", (1,), "zeros")

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
                   prefix: str = "") -> "DiscriminatorWeights":
        w = DiscriminatorWeights(desc, seed=0)
        for name in w.params:
            key = prefix + name
            if key not in tensors:
                raise ConfigError(f"checkpoint missing tensor {key!r}")
            w.params[name] = Tensor(tensors[key].copy(), dtype=w.dtype, requires_grad=True)
        return w


def _he(fan_in: int) -> float:
    return 1.0 / np.sqrt(fan_in)


def discriminate(image: Tensor, k: int, g_arch: np.ndarray,
                 weights: DiscriminatorWeights) -> Tensor:
    """Score a batch entered at block k. Returns raw logits [N, 1]."""
    d = weights.desc
    if k not in d.supported_blocks:
        raise ConfigError(f"block {k} has no fromRGB entry; supported: {d.supported_blocks}")
    res = d.block_resolution(k)
    if image.data.ndim != 4 or image.shape[1] != 3 or image.shape[2] != res or image.shape[3] != res:
        raise TensorError(
            f"discriminate: image {image.shape} does not match block {k} resolution {res}")
    g_arch = np.asarray(g_arch, dtype=np.float32)
    if g_arch.shape != (4 * d.num_mod_layers,):
        raise ConfigError(f"g_arch length {g_arch.shape} != {4 * d.num_mod_layers}")
    garch_t = Tensor(g_arch.reshape(1, -1), dtype=weights.dtype)

    fw = weights.params[f"frgb.{k}.w"]
    fb = weights.params[f"frgb.{k}.b"]
    x = act(add(conv2d(image, mul(fw, _he(3))), fb))
    for j in range(k, 0, -1):
        if j <= _COND_STAGES:
            c = d.full_channels[j - 1]
            cw = weights.params[f"cond.{j}.w"]
            cb = weights.params[f"cond.{j}.b"]
            sc_bias = dense(garch_t, cw, cb)  # zero-init: identity at start
            scale = reshape(narrow(sc_bias, 1, 0, c), (1, c, 1, 1))
            bias = reshape(narrow(sc_bias, 1, c, c), (1, c, 1, 1))
            x = add(mul(x, add(scale, 1.0)), bias)
        sw = weights.params[f"stage.{j}.w"]
        sb = weights.params[f"stage.{j}.b"]
        x = act(add(conv2d(x, mul(sw, _he(sw.shape[1] * 9)), pad=1), sb))
        if j > 1:
            x = downsample2x(x)
    h = dense(x, mul(weights.params["head.0.w"], _he(weights.params["head.0.w"].shape[1])),
              weights.params["head.0.b"])
    h = act(h)
    return dense(h, mul(weights.params["head.1.w"], _he(_HEAD_HIDDEN)),
                 weights.params["head.1.b"])


def sample_real_g_arch(rng: np.random.Generator, desc: ArchDescriptor,
                       res_block: int | None = None,
                       mode: str = "flexible") -> np.ndarray:
    """Architecture vector for the real branch, drawn from the same scheme
    used for fakes at that resolution. Independent draw by default; pass a
    res_block to match the iteration's resolution."""
    from elastigen.training import sample_config  # config sampling lives there
    cfg = sample_config(rng, mode, desc)
    if res_block is not None:
        cfg = make_config(res_block, cfg.ratios, desc)
    return encode_g_arch(cfg, desc)
