"""Noisy self-training for dense passage retrieval at desk scale."""

from .corpus import (
    Passage,
    Query,
    Vocabulary,
    build_vocab,
    load_passages,
    load_queries,
    tokenize,
)
from .model import EncoderParams, encode, init_params, load_checkpoint, save_checkpoint
from .noise import NoiseConfig, apply_noise
from .pipeline import PipelineConfig, run_self_training
from .train import TrainingConfig, train_epochs

__version__ = "0.1.0"

__all__ = [
    "EncoderParams",
    "NoiseConfig",
    "Passage",
    "PipelineConfig",
    "Query",
    "TrainingConfig",
    "Vocabulary",
    "apply_noise",
    "build_vocab",
    "encode",
    "init_params",
    "load_checkpoint",
    "load_passages",
    "load_queries",
    "run_self_training",
    "save_checkpoint",
    "tokenize",
    "train_epochs",
]
