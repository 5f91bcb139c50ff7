"""Deformable 3-D registration with attention over per-voxel displacement bases."""
from .config import (ConfigError, DeformerConfig, EncoderConfig, LossWeights, RefinerConfig, RunConfig,
                     desk_config, toy_config)
from .metrics import dice, jacobian_determinant, jacobian_stats
from .model import DMRNet, ForwardOutput
from .synthetic import SyntheticPair, gen_synthetic_pair
from .trainer import PairDataset, Registration, evaluate_pair, register, train

__all__ = [
    "ConfigError", "DeformerConfig", "EncoderConfig", "LossWeights", "RefinerConfig", "RunConfig",
    "desk_config", "toy_config", "dice", "jacobian_determinant", "jacobian_stats", "DMRNet",
    "ForwardOutput", "SyntheticPair", "gen_synthetic_pair", "PairDataset", "Registration",
    "evaluate_pair", "register", "train",
]
