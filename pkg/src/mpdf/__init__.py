"""Audio-visual deepfake detection and temporal localization by next-frame feature prediction."""
from .config import ModelConfig, load_model_config
from .estimators import NextFrameDeepfakeClassifier, NextFrameDeepfakeLocalizer
from .synthdata import CATEGORIES, GeneratorConfig, SyntheticSample, generate_dataset, generate_sample, load_manifest

__version__ = "0.1.0"

__all__ = [
    "CATEGORIES",
    "GeneratorConfig",
    "ModelConfig",
    "NextFrameDeepfakeClassifier",
    "NextFrameDeepfakeLocalizer",
    "SyntheticSample",
    "generate_dataset",
    "generate_sample",
    "load_manifest",
    "load_model_config",
]
