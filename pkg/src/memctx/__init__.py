"""Desk-scale history-memory compression for autoregressive video diffusion."""

from . import compressor, data, diffusion, dit, metrics, nn, rollout, seeding, tensor
from .tensor import Tensor

__all__ = [
    "Tensor",
    "compressor",
    "data",
    "diffusion",
    "dit",
    "metrics",
    "nn",
    "rollout",
    "seeding",
    "tensor",
]

__version__ = "0.1.0"
