"""Evolutionary prompt optimization: fluent feature dreaming for language models."""

__version__ = "0.1.0"

from .core import (
    ConfigError,
    DegenerateBaselineError,
    EngineError,
    EpoConfig,
    FrontierPoint,
    InputError,
    LambdaGrid,
    ModelError,
    ParetoArchive,
    ScoredPrompt,
    Vocabulary,
    archive_insert,
    combined_objective,
    lambda_grid,
)
from .engine import RunResult, Scorer, run
from .model import FeatureModel, ModelOutputs, ToyTransformer, ToyTransformerSpec, train_toy
from .objectives import FeatureSpec

__all__ = [
    "ConfigError",
    "DegenerateBaselineError",
    "EngineError",
    "EpoConfig",
    "FeatureModel",
    "FeatureSpec",
    "FrontierPoint",
    "InputError",
    "LambdaGrid",
    "ModelError",
    "ModelOutputs",
    "ParetoArchive",
    "RunResult",
    "ScoredPrompt",
    "Scorer",
    "ToyTransformer",
    "ToyTransformerSpec",
    "Vocabulary",
    "archive_insert",
    "combined_objective",
    "lambda_grid",
    "run",
    "train_toy",
]
