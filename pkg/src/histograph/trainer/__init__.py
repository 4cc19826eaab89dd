"""Losses, optimizer, storage formats and training loops."""

from .losses import MaskedBatchWarning, accuracy, cross_entropy, loss_fn, masked_bce, mse, roc_auc
from .loop import (MODES, TRAIN_TASKS, TrainConfig, cache_activations, evaluate, finetune_head,
                   model_from_checkpoint, train)
from .optim import Adam, AdamHyper, adam_step
from .storage import ActivationCache, CachedGraph, Checkpoint

__all__ = [
    "MaskedBatchWarning", "accuracy", "cross_entropy", "loss_fn", "masked_bce", "mse", "roc_auc",
    "MODES", "TRAIN_TASKS", "TrainConfig", "cache_activations", "evaluate", "finetune_head",
    "model_from_checkpoint", "train", "Adam", "AdamHyper", "adam_step", "ActivationCache",
    "CachedGraph", "Checkpoint",
]
