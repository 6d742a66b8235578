"""Desk-scale laboratory for semantics-aware agent communication links.

Three studies share one numerics substrate: an autoencoder image codec
fine-tuned online against channel drift, a lightweight transmission path
(pruning, quantization, feedback-driven partial sampling), and a
two-timescale Q-learning orchestrator for beam, power, and compression
choices in a small interference network.
"""

__version__ = "0.1.0"

from .errors import (
    SemnetError,
    ShapeMismatch,
    ContractViolation,
    NumericalFault,
    TrainingFault,
    CheckpointError,
    DataFormatError,
    ConfigError,
)
from .nn import Mlp, Layer, init_mlp, named_stream

__all__ = [
    "__version__",
    "SemnetError",
    "ShapeMismatch",
    "ContractViolation",
    "NumericalFault",
    "TrainingFault",
    "CheckpointError",
    "DataFormatError",
    "ConfigError",
    "Mlp",
    "Layer",
    "init_mlp",
    "named_stream",
]
