"""Multimodal graph-fusion models for ordinal prediction on paired heatmaps."""

from . import birch, cli, config, data, encoder, evaluation, fusion, graph_build
from . import model, ordinal, synth, tensor, training
from .data import Endpoint, Modality, ModalGraph, PairedSample, RaterLabel
from .fusion import FusionStrategy
from .model import Model, ModelConfig
from .synth import GeneratorConfig, RaterSpec
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "Endpoint",
    "FusionStrategy",
    "GeneratorConfig",
    "Modality",
    "ModalGraph",
    "Model",
    "ModelConfig",
    "PairedSample",
    "RaterLabel",
    "RaterSpec",
    "TrainConfig",
    "birch",
    "cli",
    "config",
    "data",
    "encoder",
    "evaluation",
    "fusion",
    "graph_build",
    "model",
    "ordinal",
    "synth",
    "tensor",
    "training",
]
