"""Oracles shared between the module tests and the acceptance suite."""

import numpy as np

from elastigen import generator as G
from elastigen.generator import (
    ArchDescriptor, GeneratorWeights, SubnetConfig, WPlus, full_config,
)
from elastigen.tensor import (
    Tensor, add, dense, leaky_relu, modulated_conv2d, mul, narrow, no_grad,
    reshape, upsample2x,
)


def reference_full_forward(wplus: WPlus, weights: GeneratorWeights, noise_seed=0):
    """Straight-line full forward pass with no slicing code path."""
    d = weights.desc
    styles = []
    t = Tensor(wplus.rows)
    for r in range(d.num_style_rows):
        styles.append(reshape(narrow(t, 0, r, 1), (1, d.style_dim)))
    with no_grad():
        x = weights.params["const"]
        prev = x.shape[1]
        rgb = None
        for k in range(1, d.num_blocks + 1):
            res = d.block_resolution(k)
            if k > 1:
                x = upsample2x(x, "bilinear")
            for j in (0, 1):
                layer = 2 * (k - 1) + j
                w = weights.params[f"layer.{layer}.w"]
                b = weights.params[f"layer.{layer}.b"]
                sw = weights.params[f"layer.{layer}.style.w"]
                sb = weights.params[f"layer.{layer}.style.b"]
                style = dense(styles[layer], mul(sw, 1.0 / np.sqrt(sw.shape[1])), sb)
                x = modulated_conv2d(x, mul(w, 1.0 / np.sqrt(prev * 9)), style,
                                     demodulate=True)
                gain = weights.params[f"layer.{layer}.noise_gain"]
                noise = Tensor(G._layer_noise(d, layer, res, noise_seed, weights.dtype))
                x = add(x, mul(noise, gain))
                x = mul(leaky_relu(add(x, b)), float(np.sqrt(2.0)))
                prev = w.shape[0]
            tw = weights.params[f"trgb.{k}.w"]
            tb = weights.params[f"trgb.{k}.b"]
            tsw = weights.params[f"trgb.{k}.style.w"]
            tsb = weights.params[f"trgb.{k}.style.b"]
            t_style = dense(styles[d.num_mod_layers], mul(tsw, 1.0 / np.sqrt(tsw.shape[1])),
                            tsb)
            rgb = add(modulated_conv2d(x, mul(tw, 1.0 / np.sqrt(prev)), t_style,
                                       demodulate=False), tb)
    return rgb.numpy()


def extract_subgenerator(weights: GeneratorWeights, config: SubnetConfig):
    """Physically copy the configured channel slices into a standalone
    generator whose descriptor has exactly the sliced channel counts."""
    d = weights.desc
    sub_channels = []
    for k in range(1, config.res_block + 1):
        layer = 2 * (k - 1) + 1
        _, c_out = d.layer_channels(layer)
        sub_channels.append(int(config.ratios[layer] * c_out))
    sub_desc = ArchDescriptor(
        base_resolution=d.base_resolution, num_blocks=config.res_block,
        full_channels=tuple(sub_channels), style_dim=d.style_dim, z_dim=d.z_dim,
        supported_blocks=(config.res_block,), mapping_layers=d.mapping_layers)
    sub = GeneratorWeights(sub_desc, seed=0)
    prev = d.full_channels[0]
    for layer in range(2 * config.res_block):
        _, c_out = d.layer_channels(layer)
        n_out = int(config.ratios[layer] * c_out)
        src_w = weights.params[f"layer.{layer}.w"].numpy()
        sub.params[f"layer.{layer}.w"] = Tensor(src_w[:n_out, :prev].copy(),
                                                requires_grad=True)
        sub.params[f"layer.{layer}.b"] = Tensor(
            weights.params[f"layer.{layer}.b"].numpy()[:, :n_out].copy(), requires_grad=True)
        sub.params[f"layer.{layer}.style.w"] = Tensor(
            weights.params[f"layer.{layer}.style.w"].numpy()[:prev].copy(), requires_grad=True)
        sub.params[f"layer.{layer}.style.b"] = Tensor(
            weights.params[f"layer.{layer}.style.b"].numpy()[:prev].copy(), requires_grad=True)
        sub.params[f"layer.{layer}.noise_gain"] = Tensor(
            weights.params[f"layer.{layer}.noise_gain"].numpy().copy(), requires_grad=True)
        prev = n_out
    k = config.res_block
    sub.params[f"trgb.{k}.w"] = Tensor(
        weights.params[f"trgb.{k}.w"].numpy()[:, :prev].copy(), requires_grad=True)
    sub.params[f"trgb.{k}.b"] = Tensor(
        weights.params[f"trgb.{k}.b"].numpy().copy(), requires_grad=True)
    sub.params[f"trgb.{k}.style.w"] = Tensor(
        weights.params[f"trgb.{k}.style.w"].numpy()[:prev].copy(), requires_grad=True)
    sub.params[f"trgb.{k}.style.b"] = Tensor(
        weights.params[f"trgb.{k}.style.b"].numpy()[:prev].copy(), requires_grad=True)
    sub.params["const"] = Tensor(weights.params["const"].numpy().copy(), requires_grad=True)
    sub.sorted_channels = True
    return sub, sub_desc


def feature_mean_stats(images: np.ndarray, batch: int = 32):
    """Per-stage global-average feature vectors of the shared pyramid."""
    from elastigen.perceptual import FeaturePyramidWeights, _features
    w = FeaturePyramidWeights()
    sums = None
    count = 0
    with no_grad():
        for i in range(0, len(images), batch):
            feats = _features(Tensor(images[i:i + batch].astype(np.float32)), w)
            vecs = [f.numpy().mean(axis=(2, 3)).sum(axis=0) for f in feats]
            if sums is None:
                sums = vecs
            else:
                sums = [s + v for s, v in zip(sums, vecs)]
            count += images[i:i + batch].shape[0]
    return [s / count for s in sums]


def feature_mean_distance(a_stats, b_stats) -> float:
    return float(np.mean([np.mean((x - y) ** 2) for x, y in zip(a_stats, b_stats)]))


def generator_samples(gweights, n: int, seed: int, config=None, psi: float = 1.0,
                      batch: int = 16) -> np.ndarray:
    from elastigen.generator import mapping_batch, synthesize_styles
    desc = gweights.desc
    cfg = config or full_config(desc)
    rng = np.random.default_rng(seed)
    out = []
    with no_grad():
        for i in range(0, n, batch):
            m = min(batch, n - i)
            z = rng.standard_normal((m, desc.z_dim)).astype(np.float32)
            w = mapping_batch(z, gweights, psi=psi)
            img, _ = synthesize_styles([w] * desc.num_style_rows, cfg, gweights,
                                       noise_seed=seed + i, intermediates=False)
            out.append(img.numpy())
    return np.concatenate(out, axis=0)
