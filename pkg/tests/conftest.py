"""Shared fixtures.

The trained-model fixtures are expensive (tens of minutes for the full
chain), so they are built once and cached on disk under tests/.cache,
keyed by a pipeline version string. Bump PIPELINE_VERSION after any change
that affects training results to invalidate the cache.
"""

import os

import numpy as np
import pytest

from elastigen import persistence
from elastigen.data import DatasetSpec, build_dataset, load_dataset

PIPELINE_VERSION = "v2"
CACHE = os.path.join(os.path.dirname(__file__), ".cache", PIPELINE_VERSION)

DATASET_SEED = 0
DATASET_COUNT = 2048
RESOLUTION = 32

BASE_STEPS = 2200
MULTIRES_STEPS = 1600
ADAPTIVE_STEPS = 2200       # the criterion-6 ablation pair length
ADAPTIVE_EXT_STEPS = 2400   # extra consistency training for the shipped ckpt
CONSISTENCY_WEIGHT = 3.0
BATCH = 8


def _cache_path(name: str) -> str:
    os.makedirs(CACHE, exist_ok=True)
    return os.path.join(CACHE, name)


@pytest.fixture(scope="session")
def toy_dataset():
    path = _cache_path("dataset")
    if not os.path.exists(os.path.join(path, "index.json")):
        build_dataset(DatasetSpec(count=DATASET_COUNT, resolution=RESOLUTION,
                                  seed=DATASET_SEED), path)
    return load_dataset(path)


def _load_or_train(name: str, builder):
    path = _cache_path(name)
    if os.path.exists(path):
        return persistence.load(path)
    bundle = builder()
    persistence.save(bundle, path)
    return bundle


@pytest.fixture(scope="session")
def base_ckpt(toy_dataset):
    from elastigen.training import TrainConfig, run_stage

    def build():
        cfg = TrainConfig(stage="base", total_images=BASE_STEPS * BATCH,
                          batch_size=BATCH, seed=10, log_every=200)
        bundle, history = run_stage(cfg, toy_dataset)
        bundle.metadata["history"] = history
        return bundle

    return _load_or_train("base.ckpt", build)


@pytest.fixture(scope="session")
def multires_ckpt(toy_dataset, base_ckpt):
    from elastigen.training import TrainConfig, run_stage

    def build():
        cfg = TrainConfig(stage="multires", total_images=MULTIRES_STEPS * BATCH,
                          batch_size=BATCH, seed=11, log_every=200)
        bundle, history = run_stage(cfg, toy_dataset, init=base_ckpt)
        bundle.metadata["history"] = history
        return bundle

    return _load_or_train("multires.ckpt", build)


def _adaptive_cfg(consistency_weight: float, steps=ADAPTIVE_STEPS, seed=12):
    from elastigen.training import TrainConfig
    return TrainConfig(stage="adaptive", total_images=steps * BATCH,
                       batch_size=BATCH, seed=seed, log_every=100,
                       consistency_weight=consistency_weight)


@pytest.fixture(scope="session")
def adaptive_pair_ckpt(toy_dataset, multires_ckpt):
    """With-consistency arm of the criterion-6 ablation pair."""
    from elastigen.training import run_stage

    def build():
        bundle, history = run_stage(_adaptive_cfg(CONSISTENCY_WEIGHT), toy_dataset,
                                    init=multires_ckpt)
        bundle.metadata["history"] = history
        return bundle

    return _load_or_train("adaptive-pair.ckpt", build)


@pytest.fixture(scope="session")
def adaptive_nocons_ckpt(toy_dataset, multires_ckpt):
    """Ablation arm: same seed and length, consistency weight zero."""
    from elastigen.training import run_stage

    def build():
        bundle, history = run_stage(_adaptive_cfg(0.0), toy_dataset, init=multires_ckpt)
        bundle.metadata["history"] = history
        return bundle

    return _load_or_train("adaptive-nocons.ckpt", build)


@pytest.fixture(scope="session")
def adaptive_ckpt(toy_dataset, adaptive_pair_ckpt):
    """The shipped acceptance checkpoint: the with-consistency arm continued
    for additional consistency training."""
    from elastigen.training import run_stage

    def build():
        bundle, history = run_stage(
            _adaptive_cfg(CONSISTENCY_WEIGHT, steps=ADAPTIVE_EXT_STEPS, seed=13),
            toy_dataset, init=adaptive_pair_ckpt)
        bundle.metadata["history"] = (adaptive_pair_ckpt.metadata.get("history", [])
                                      + history)
        return bundle

    return _load_or_train("adaptive.ckpt", build)


@pytest.fixture(scope="session")
def deploy_ckpt(toy_dataset, adaptive_ckpt):
    """Adaptive checkpoint + consistency-aware encoder + directions + ladder."""

    def build():
        from elastigen.data import ATTRIBUTE_NAMES
        from elastigen.projection import (
            DegenerateLabelsError, EncoderTrainConfig, compute_direction, train_encoder,
        )
        from elastigen.service import default_ladder
        from elastigen.training import load_train_bundle
        desc, gweights, _ = load_train_bundle(adaptive_ckpt)
        enc, _ = train_encoder(toy_dataset, gweights,
                               EncoderTrainConfig(epochs=3, batch_size=8, seed=20))
        directions = {}
        for name in ATTRIBUTE_NAMES:
            try:
                d = compute_direction(name, gweights, sample_count=2000, seed=21)
                directions[name] = {"vector": [float(v) for v in d.vector],
                                    "magnitude_range": list(d.magnitude_range)}
            except DegenerateLabelsError:
                pass
        bundle = persistence.CheckpointBundle(metadata={
            **adaptive_ckpt.metadata,
            "kind": "deploy",
            "directions": directions,
            "budget_ladder": default_ladder(desc),
        })
        for name, arr in adaptive_ckpt.tensors.items():
            bundle.put(name, arr)
        for name, arr in enc.state_tensors().items():
            bundle.put(f"E.{name}", arr)
        return bundle

    return _load_or_train("deploy.ckpt", build)


@pytest.fixture(scope="session")
def encoder_nocons(toy_dataset, adaptive_ckpt):
    """Baseline encoder trained without the sub-network term."""
    path = _cache_path("encoder-nocons.ckpt")
    from elastigen.generator import ArchDescriptor
    from elastigen.projection import EncoderWeights
    if os.path.exists(path):
        bundle = persistence.load(path)
        desc = ArchDescriptor.from_metadata(bundle.metadata["descriptor"])
        return EncoderWeights.from_state(desc, bundle.tensors, prefix="E.")
    from elastigen.projection import EncoderTrainConfig, train_encoder
    from elastigen.training import load_train_bundle
    desc, gweights, _ = load_train_bundle(adaptive_ckpt)
    enc, _ = train_encoder(toy_dataset, gweights,
                           EncoderTrainConfig(epochs=3, batch_size=8, seed=20,
                                              consistency=False))
    bundle = persistence.CheckpointBundle(
        metadata={"kind": "encoder", "descriptor": desc.to_metadata()})
    for name, arr in enc.state_tensors().items():
        bundle.put(f"E.{name}", arr)
    persistence.save(bundle, path)
    return enc
