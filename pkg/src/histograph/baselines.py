"""Reference readouts: last-layer mean/sum/max and jumping-knowledge concatenation."""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .backbone import ActivationHistory
from .errors import ConfigError, ContractError
from .graphdata import segment_mean_matrix, segment_sum_matrix
from .numcore import Tensor

READOUT_KINDS = ("mean", "sum", "max", "jk_concat", "histograph")
_ALIASES = {"jk": "jk_concat"}


def canonical_readout(kind: str) -> str:
    kind = _ALIASES.get(kind, kind)
    if kind not in READOUT_KINDS:
        raise ConfigError(f"unknown readout {kind!r}; expected one of {READOUT_KINDS}")
    return kind


def _check_nonempty(history: ActivationHistory) -> np.ndarray:
    counts = np.bincount(history.node_graph_id, minlength=history.num_graphs)
    if np.any(counts == 0):
        raise ContractError("readout over an empty graph")
    return counts


def _reduce(kind: str, x: Tensor, history: ActivationHistory) -> Tensor:
    _check_nonempty(history)
    ids, g = history.node_graph_id, history.num_graphs
    if kind == "mean":
        return nc.sparse_matmul(segment_mean_matrix(ids, g), x)
    if kind == "sum":
        return nc.sparse_matmul(segment_sum_matrix(ids, g), x)
    if kind == "max":
        if np.any(np.diff(ids) < 0):
            raise ContractError("max readout requires nodes grouped by graph")
        return nc.segment_max(x, history.offsets)
    raise ConfigError(f"unknown reduction {kind!r}")


def pool_last_layer(kind: str, history: ActivationHistory) -> Tensor:
    """Reduce the final history slice over the nodes of each graph."""
    last = history.layer(history.num_layers - 1)
    return _reduce(kind, last, history)


def jk_concat(history: ActivationHistory) -> Tensor:
    """Mean-pool every layer, concatenated in layer order (width ``L * D``)."""
    n, num_layers, d = history.tensor.shape
    flat = nc.reshape(history.tensor, (n, num_layers * d))
    return _reduce("mean", flat, history)


def node_readout(kind: str, history: ActivationHistory) -> Tensor:
    """Node-level counterpart: final-layer rows, or all layers side by side for ``jk_concat``."""
    kind = canonical_readout(kind)
    n, num_layers, d = history.tensor.shape
    if kind == "jk_concat":
        return nc.reshape(history.tensor, (n, num_layers * d))
    if kind == "histograph":
        raise ConfigError("histograph readout lives in histopool")
    return history.layer(num_layers - 1)


def readout_width(kind: str, num_layers: int, width: int) -> int:
    return num_layers * width if canonical_readout(kind) == "jk_concat" else width
