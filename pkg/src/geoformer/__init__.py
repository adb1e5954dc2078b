"""Geometric Transformer for molecular properties and forces on a small numpy autodiff engine."""

from .attention import AttentionVariant
from .augment import MixConfig, augment_half_batch, mix
from .data import Batch, DatasetManifest, Molecule, load_extxyz, make_batch, split_dataset
from .estimator import GeoTransformerRegressor
from .exceptions import (CheckpointVersionError, ConfigError, ContractError, DataError,
                         DimensionError, GeoformerError, NumericError, ParseError,
                         UnsupportedDepthError)
from .model import GeoTransformer, ModelConfig, load_checkpoint, save_checkpoint
from .training import Adam, PlateauScheduler, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Adam", "AttentionVariant", "Batch", "CheckpointVersionError", "ConfigError", "ContractError",
    "DataError", "DatasetManifest", "DimensionError", "GeoTransformer", "GeoTransformerRegressor",
    "GeoformerError", "MixConfig", "ModelConfig", "Molecule", "NumericError", "ParseError",
    "PlateauScheduler", "TrainConfig", "UnsupportedDepthError", "augment_half_batch",
    "load_checkpoint", "load_extxyz", "make_batch", "mix", "save_checkpoint", "split_dataset", "train",
]
