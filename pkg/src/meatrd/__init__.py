"""Multimodal anomalous tissue region detection on spatial transcriptomics spots."""

from .config import ConfigError, load_config
from .data import Preprocessor, SpatialDataset, load_dataset, save_dataset
from .graph import SpotGraph, build_knn_graph
from .metrics import EvalResult, auc, f1_at_prevalence
from .pipeline import MEATRD, VARIANTS
from .synth import SynthConfig, generate, preset
from .threshold import MapEmThreshold, fit_map_em

__all__ = [
    "MEATRD", "VARIANTS", "ConfigError", "load_config", "Preprocessor", "SpatialDataset", "load_dataset",
    "save_dataset", "SpotGraph", "build_knn_graph", "EvalResult", "auc", "f1_at_prevalence", "SynthConfig",
    "generate", "preset", "MapEmThreshold", "fit_map_em",
]
__version__ = "0.1.0"
