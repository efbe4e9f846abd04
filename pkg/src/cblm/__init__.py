"""Concept bottleneck protein language models: concepts, training, interventions."""
from .concepts import ConceptRegistry, NormalizationStats, compute_all
from .corpus import Corpus
from .model import CbModel, ModelConfig, build_model
from .train import TrainConfig, train

__all__ = ["CbModel", "ConceptRegistry", "Corpus", "ModelConfig", "NormalizationStats", "TrainConfig",
           "build_model", "compute_all", "train"]
__version__ = "0.1.0"
