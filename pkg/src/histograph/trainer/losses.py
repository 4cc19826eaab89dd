"""Supervised objectives and evaluation metrics."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import rankdata

from .. import numcore as nc
from ..errors import ConfigError, ShapeError
from ..numcore import Tensor


class MaskedBatchWarning(UserWarning):
    """Every target in a multi-label batch was masked; the loss was set to 0."""


def cross_entropy(logits: Tensor, targets) -> Tensor:
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != len(targets):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs {len(targets)} targets")
    picked = nc.log_softmax(logits, axis=1)[np.arange(len(targets)), targets]
    return nc.neg(nc.mean(picked))


def mse(pred: Tensor, targets) -> Tensor:
    targets = np.asarray(targets, dtype=pred.dtype).reshape(pred.shape)
    diff = nc.sub(pred, targets)
    return nc.mean(nc.mul(diff, diff))


def masked_bce(logits: Tensor, targets) -> Tensor:
    """Binary cross-entropy with logits; NaN targets are masked out of the mean."""
    targets = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    mask = ~np.isnan(targets)
    count = int(mask.sum())
    if count == 0:
        warnings.warn("all targets masked; loss defined as 0", MaskedBatchWarning, stacklevel=2)
        return nc.mul(nc.tsum(logits), 0.0)
    y = np.where(mask, targets, 0.0).astype(logits.dtype)
    z = logits.data
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    value = np.asarray((per * mask).sum() / count, dtype=logits.dtype)
    prob = 1.0 / (1.0 + np.exp(-z))

    def backward(g):
        return (g * (prob - y) * mask / count,)

    return nc.record("masked_bce", value, (logits,), backward)


def loss_fn(task: str, logits: Tensor, targets) -> Tensor:
    if task in ("graph_class", "node_class"):
        return cross_entropy(logits, targets)
    if task == "multilabel":
        return masked_bce(logits, targets)
    if task == "node_regress":
        return mse(logits, targets)
    raise ConfigError(f"no loss for task {task!r}")


def accuracy(logits: np.ndarray, targets) -> float:
    targets = np.asarray(targets).reshape(-1)
    if len(targets) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits, axis=1) == targets))


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties get average ranks)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
