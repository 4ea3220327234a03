"""Command-line entry points: thin dispatch over the library pathways."""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from elastigen import persistence
from elastigen.data import DatasetSpec, build_dataset, load_dataset
from elastigen.generator import (
    ArchDescriptor, ConfigError, count_macs, full_config, make_config,
    mapping, synthesize, uniform_config,
)


def _fail(message: str, code: int = 1):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_bundle(path: str) -> persistence.CheckpointBundle:
    try:
        return persistence.load(path)
    except (OSError, persistence.CheckpointError) as e:
        _fail(f"cannot load checkpoint {path}: {e}")


def _parse_config(spec: str, desc: ArchDescriptor):
    """'full', '0.5x', '0.5x@3', or 'k<block>:<r0>,<r1>,...'."""
    if spec == "full":
        return full_config(desc)
    if spec.endswith("x") or "x@" in spec:
        if "@" in spec:
            ratio_s, block_s = spec.split("@")
            block = int(block_s)
        else:
            ratio_s, block = spec, desc.num_blocks
        ratio = float(ratio_s.rstrip("x"))
        return uniform_config(desc, ratio, block)
    if spec.startswith("k") and ":" in spec:
        head, genes = spec[1:].split(":")
        from elastigen.generator import ALLOWED_RATIOS
        ratios = [ALLOWED_RATIOS[int(g)] for g in genes.split(",")]
        return make_config(int(head), ratios, desc)
    raise ConfigError(f"cannot parse config spec {spec!r}")


@click.group()
def main():
    """Elastic generator toolkit."""


@main.command()
@click.option("--out", required=True, help="output dataset directory")
@click.option("--count", default=2048, show_default=True)
@click.option("--resolution", default=32, show_default=True)
@click.option("--seed", required=True, type=int)
def dataset(out, count, resolution, seed):
    """Render the synthetic scene dataset."""
    build_dataset(DatasetSpec(count=count, resolution=resolution, seed=seed), out)
    click.echo(f"dataset written to {out}")


@main.command()
@click.option("--stage", required=True,
              type=click.Choice(["base", "multires", "adaptive", "encoder"]))
@click.option("--data", "data_dir", required=True, help="dataset directory")
@click.option("--out", required=True, help="output checkpoint path")
@click.option("--init", "init_path", default=None, help="checkpoint to start from")
@click.option("--images", default=16000, show_default=True, help="images to show")
@click.option("--batch", default=8, show_default=True)
@click.option("--seed", required=True, type=int)
@click.option("--consistency-weight", default=1.0, show_default=True)
@click.option("--channel-mode", default="flexible",
              type=click.Choice(["uniform", "flexible"]), show_default=True)
@click.option("--epochs", default=4, show_default=True, help="encoder stage only")
@click.option("--ladder", "ladder_path", default=None,
              help="search result file(s) to embed, comma-separated (encoder stage)")
@click.option("--log", "log_path", default=None, help="metric log file")
def train(stage, data_dir, out, init_path, images, batch, seed,
          consistency_weight, channel_mode, epochs, ladder_path, log_path):
    """Run one training stage (or the encoder stage) and write a checkpoint."""
    from elastigen import training
    ds = load_dataset(data_dir)
    init = _load_bundle(init_path) if init_path else None
    if stage == "encoder":
        _train_encoder_stage(ds, init, out, epochs, batch, seed, ladder_path)
        return
    cfg = training.TrainConfig(stage=stage, total_images=images, batch_size=batch,
                               seed=seed, consistency_weight=consistency_weight,
                               channel_mode=channel_mode, log_path=log_path)
    try:
        bundle, _ = training.run_stage(cfg, ds, init=init)
    except (ConfigError, training.TrainingDiverged) as e:
        _fail(str(e))
    persistence.save(bundle, out)
    click.echo(f"{stage} checkpoint written to {out}")


def _train_encoder_stage(ds, init, out, epochs, batch, seed, ladder_path):
    from elastigen.data import ATTRIBUTE_NAMES
    from elastigen.projection import (
        DegenerateLabelsError, EncoderTrainConfig, compute_direction, train_encoder,
    )
    from elastigen.service import default_ladder
    from elastigen.training import load_train_bundle
    if init is None:
        _fail("encoder stage requires --init with an adaptive checkpoint")
    if init.metadata.get("stage") != "adaptive":
        _fail(f"encoder stage requires an adaptive checkpoint, "
              f"got {init.metadata.get('stage')!r}")
    desc, gweights, _ = load_train_bundle(init)
    enc, _ = train_encoder(ds, gweights,
                           EncoderTrainConfig(epochs=epochs, batch_size=batch, seed=seed))
    directions = {}
    for name in ATTRIBUTE_NAMES:
        try:
            d = compute_direction(name, gweights, seed=seed)
            directions[name] = {"vector": [float(v) for v in d.vector],
                                "magnitude_range": list(d.magnitude_range)}
        except DegenerateLabelsError as e:
            click.echo(f"skipping direction {name}: {e}", err=True)
    ladder = default_ladder(desc)
    if ladder_path:
        ladder = []
        for i, piece in enumerate(ladder_path.split(",")):
            with open(piece, encoding="utf-8") as f:
                doc = json.load(f)
            best = doc["best"]
            ladder.append({"id": f"search-{i}", "res_block": best["res_block"],
                           "ratios": best["ratios"], "latency_ms": None})
    bundle = persistence.CheckpointBundle(metadata={
        **init.metadata,
        "kind": "deploy",
        "directions": directions,
        "budget_ladder": ladder,
    })
    for name, arr in init.tensors.items():
        bundle.put(name, arr)
    for name, arr in enc.state_tensors().items():
        bundle.put(f"E.{name}", arr)
    persistence.save(bundle, out)
    click.echo(f"deploy checkpoint written to {out}")


@main.command()
@click.option("--ckpt", required=True)
@click.option("--budget", required=True,
              help="MAC budget: absolute count or fraction like 0.3x")
@click.option("--out", required=True, help="search result file")
@click.option("--seed", required=True, type=int)
@click.option("--population", default=50, show_default=True)
@click.option("--iterations", default=20, show_default=True)
@click.option("--eval-samples", default=256, show_default=True)
def search(ckpt, budget, out, seed, population, iterations, eval_samples):
    """Evolutionary sub-network search under a MAC budget."""
    from elastigen.search import BudgetError, SearchParams, evolve, save_result
    from elastigen.training import load_train_bundle
    bundle = _load_bundle(ckpt)
    desc, gweights, _ = load_train_bundle(bundle)
    if not gweights.sorted_channels:
        _fail("checkpoint is not channel-sorted; run the adaptive stage first")
    full = count_macs(desc, full_config(desc))
    budget_macs = int(float(budget.rstrip("x")) * full) if budget.endswith("x") else int(budget)
    params = SearchParams(population=population, iterations=iterations,
                          elite=max(1, population // 5),
                          crossover=max(1, population // 2),
                          mutation=max(1, population // 2),
                          eval_samples=eval_samples, seed=seed)
    try:
        result = evolve(gweights, budget_macs, params)
    except BudgetError as e:
        _fail(str(e))
    save_result(result, desc, out)
    click.echo(f"best config {result.best.config.digest()} fitness={result.best.fitness:.6f} "
               f"macs={result.best.macs} -> {out}")


@main.command()
@click.option("--ckpt", required=True)
@click.option("--out", required=True, help="output directory for PNG samples")
@click.option("--count", default=8, show_default=True)
@click.option("--seed", required=True, type=int)
@click.option("--psi", default=0.5, show_default=True)
@click.option("--config", "config_spec", default="full", show_default=True)
def sample(ckpt, out, count, seed, psi, config_spec):
    """Generate image samples at a chosen sub-network configuration."""
    from PIL import Image
    from elastigen.training import load_train_bundle
    bundle = _load_bundle(ckpt)
    desc, gweights, _ = load_train_bundle(bundle)
    cfg = _parse_config(config_spec, desc)
    os.makedirs(out, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(count):
        wp = mapping(rng.standard_normal(desc.z_dim), psi, gweights)
        img, _ = synthesize(wp, cfg, gweights, noise_seed=seed + i, intermediates=False)
        u8 = np.clip((img[0].transpose(1, 2, 0) + 1) * 127.5, 0, 255).astype(np.uint8)
        Image.fromarray(u8).save(os.path.join(out, f"sample-{i:03d}.png"))
    click.echo(f"{count} samples written to {out}")


@main.command()
@click.option("--ckpt", required=True, help="deploy checkpoint (with encoder)")
@click.option("--image", "image_path", required=True, help="PNG or .ten image file")
@click.option("--out", required=True, help="output latent file (JSON)")
@click.option("--iterations", default=100, show_default=True)
@click.option("--alpha", default=1.0, show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
def project(ckpt, image_path, out, iterations, alpha, seed):
    """Project an image into the latent space (encoder + optimization)."""
    from elastigen.projection import EncoderWeights, ProjectionConfig
    from elastigen.projection import project as project_fn
    from elastigen.training import load_train_bundle
    bundle = _load_bundle(ckpt)
    desc, gweights, _ = load_train_bundle(bundle)
    if not any(n.startswith("E.") for n in bundle.tensors):
        _fail("checkpoint has no encoder; run `train --stage encoder` first")
    enc = EncoderWeights.from_state(desc, bundle.tensors, prefix="E.")
    img = _read_image(image_path, desc.max_resolution)
    pcfg = ProjectionConfig(alpha=alpha, iterations=iterations, seed=seed, noise_seed=seed)
    result = project_fn(img, enc, gweights, pcfg)
    with open(out, "w", encoding="utf-8") as f:
        json.dump({"rows": [[float(v) for v in row] for row in result.wplus.rows],
                   "best_loss": result.best_loss, "trace": result.trace,
                   "noise_seed": seed}, f)
    click.echo(f"projected latent written to {out} (loss {result.best_loss:.5f})")


def _read_image(path: str, resolution: int) -> np.ndarray:
    if path.endswith(".ten"):
        arr = persistence.read_tensor_file(path)
    else:
        from PIL import Image
        img = Image.open(path).convert("RGB")
        arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0
    if arr.shape != (3, resolution, resolution):
        _fail(f"image must be [3,{resolution},{resolution}], got {list(arr.shape)}")
    return arr


@main.command()
@click.option("--ckpt", required=True, help="deploy checkpoint")
@click.option("--latent", "latent_path", required=True, help="latent JSON from `project`")
@click.option("--direction", required=True)
@click.option("--magnitude", required=True, type=float)
@click.option("--config", "config_spec", default="full", show_default=True)
@click.option("--out", required=True, help="output PNG")
def edit(ckpt, latent_path, direction, magnitude, config_spec, out):
    """Apply an editing direction to a projected latent and render."""
    from PIL import Image
    from elastigen.generator import WPlus
    from elastigen.projection import EditDirection
    from elastigen.projection import edit as edit_fn
    from elastigen.training import load_train_bundle
    bundle = _load_bundle(ckpt)
    desc, gweights, _ = load_train_bundle(bundle)
    dirs = bundle.metadata.get("directions", {})
    if direction not in dirs:
        _fail(f"unknown direction {direction!r}; available: {sorted(dirs)}")
    d = EditDirection(direction, np.asarray(dirs[direction]["vector"], dtype=np.float32),
                      tuple(dirs[direction]["magnitude_range"]))
    with open(latent_path, encoding="utf-8") as f:
        doc = json.load(f)
    code = edit_fn(WPlus(np.asarray(doc["rows"], dtype=np.float32)), d, magnitude)
    img, _ = synthesize(code, _parse_config(config_spec, desc), gweights,
                        noise_seed=doc.get("noise_seed", 0), intermediates=False)
    u8 = np.clip((img[0].transpose(1, 2, 0) + 1) * 127.5, 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(out)
    click.echo(f"edited render written to {out}")


@main.command()
@click.option("--ckpt", required=True)
@click.option("--out", default=None, help="report file (default: stdout)")
@click.option("--reps", default=20, show_default=True)
@click.option("--budget", "only_budget", default=None, help="bench a single budget id")
def bench(ckpt, out, reps, only_budget):
    """Measure median/p95 render latency for every ladder budget."""
    from elastigen.service import ModelSnapshot, bench_report_text
    from elastigen.service import bench as bench_fn
    bundle = _load_bundle(ckpt)
    try:
        snap = ModelSnapshot(bundle)
    except ConfigError as e:
        _fail(str(e))
    rows = bench_fn(snap, repetitions=reps)
    if only_budget:
        rows = [r for r in rows if r["budget_id"] == only_budget]
        if not rows:
            _fail(f"unknown budget {only_budget!r}")
    text = bench_report_text(rows)
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
        click.echo(f"report written to {out}")
    else:
        click.echo(text, nl=False)


@main.command()
@click.option("--ckpt", default=None, help="checkpoint for the descriptor (default: toy)")
@click.option("--config", "config_spec", default="full", show_default=True)
def macs(ckpt, config_spec):
    """Print the MAC count of a sub-network configuration."""
    if ckpt:
        bundle = _load_bundle(ckpt)
        desc = ArchDescriptor.from_metadata(bundle.metadata["descriptor"])
    else:
        desc = ArchDescriptor()
    try:
        cfg = _parse_config(config_spec, desc)
    except ConfigError as e:
        _fail(str(e))
    click.echo(str(count_macs(desc, cfg)))


@main.command()
@click.option("--ckpt", required=True)
@click.option("--data-dir", required=True, help="session storage directory")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8321, show_default=True, type=int)
@click.option("--workers", default=2, show_default=True, type=int)
@click.option("--config", "config_path", default=None,
              help="JSON service config file; flags override")
def serve(ckpt, data_dir, host, port, workers, config_path):
    """Run the HTTP editing service."""
    from elastigen.service import ServiceConfig, run_server
    if config_path:
        cfg = ServiceConfig.from_file(config_path)
        cfg.checkpoint_path = ckpt or cfg.checkpoint_path
        cfg.data_dir = data_dir or cfg.data_dir
    else:
        cfg = ServiceConfig(checkpoint_path=ckpt, data_dir=data_dir, host=host,
                            port=port, workers=workers)
    run_server(cfg)


@main.command(name="inspect-ckpt")
@click.option("--ckpt", required=True)
def inspect_ckpt(ckpt):
    """Print checkpoint metadata and the tensor table."""
    bundle = _load_bundle(ckpt)
    click.echo(json.dumps(bundle.metadata, indent=1, sort_keys=True))
    click.echo(f"tensors: {len(bundle.tensors)}")
    for name in sorted(bundle.tensors):
        arr = bundle.tensors[name]
        click.echo(f"  {name} {arr.dtype.name} {list(arr.shape)}")


if __name__ == "__main__":
    main()
