"""Elastic generative runtime: one weight-shared generator, many budgets."""

from elastigen.tensor import Tensor, Tape, backward, grad_check, no_grad
from elastigen.generator import (
    ArchDescriptor, GeneratorWeights, SubnetConfig, WPlus, count_macs,
    encode_g_arch, full_config, mapping, sort_channels, synthesize,
    uniform_config,
)
from elastigen.perceptual import consistency_metric, perceptual_distance

__all__ = [
    "Tensor", "Tape", "backward", "grad_check", "no_grad",
    "ArchDescriptor", "GeneratorWeights", "SubnetConfig", "WPlus",
    "count_macs", "encode_g_arch", "full_config", "mapping",
    "sort_channels", "synthesize", "uniform_config",
    "consistency_metric", "perceptual_distance",
]
__version__ = "0.1.0"
