"""Activation-aware product quantization of small CNNs."""

from ._pqnet import (
    ArgumentError,
    CompressedModel,
    ConfigError,
    CorruptionError,
    DegenerateDataError,
    Error,
    Network,
    ParseError,
    ShapeError,
    TrainingError,
    clamp_centroids,
    float_to_half,
    half_to_float,
    layer_footprint,
    make_stripes,
    quantize,
    toy_cnn_architecture,
    toy_resnet_architecture,
)

__all__ = [
    "ArgumentError",
    "CompressedModel",
    "ConfigError",
    "CorruptionError",
    "DegenerateDataError",
    "Error",
    "Network",
    "ParseError",
    "ShapeError",
    "TrainingError",
    "clamp_centroids",
    "float_to_half",
    "half_to_float",
    "layer_footprint",
    "make_stripes",
    "quantize",
    "toy_cnn_architecture",
    "toy_resnet_architecture",
]
