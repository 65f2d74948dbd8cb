"""Desk-scale laboratory for variance-reduction strategies in encoder fine-tuning."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .encoder import EncoderConfig, Vocabulary, classify, encode, tokenize
from .strategies import (
    LLRDSetup,
    PoolingMode,
    StrategyConfig,
    build_param_groups,
    class_weights_from_counts,
    mixout_transform,
    pool_states,
    reinit_top_layers,
    weighted_cross_entropy,
)
from .trainer import TrainConfig, finetune, lr_at_step, pretrain_toy, split_dataset, variance_study

__version__ = "0.1.0"
