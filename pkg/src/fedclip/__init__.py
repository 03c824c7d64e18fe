"""Federated optimization simulator for clipped local-update methods.

Implements episodic clipping with resampled corrections alongside CELGC,
FedAvg, SCAFFOLD and naive parallel clipping, over closed-form objectives
with bounded stochastic-gradient noise.
"""

from fedclip.core import (
    ConfigError,
    DimensionError,
    FedClipError,
    NoiseModel,
    NonFiniteError,
    Objective,
    Purpose,
    RngStream,
    as_vector,
    clip_step,
    finite_diff_gradient,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionError",
    "FedClipError",
    "NoiseModel",
    "NonFiniteError",
    "Objective",
    "Purpose",
    "RngStream",
    "as_vector",
    "clip_step",
    "finite_diff_gradient",
]
