"""Two-stage attention readout over a backbone's activation history.

Stage one scores every layer of every node against that node's final-layer
embedding, averages the scores over the nodes of each graph, and turns them
into layer weights by dividing by their sum (weights may be negative).
Stage two runs multi-head self-attention among the nodes of each graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .backbone import ActivationHistory
from .errors import ConfigError, ShapeError
from .graphdata import segment_mean_matrix
from .numcore import ParamStore, Tensor

LAYER_WEIGHTINGS = ("signed", "raw", "uniform", "random")


@dataclass
class PoolConfig:
    hidden: int = 32
    heads: int = 4
    use_residual: bool = True
    use_layernorm: bool = True
    norm_epsilon: float = 1e-6
    mix_mode: str = "learnable"
    mix_alpha: float = 0.5
    task_mode: str = "graph"
    # ablation switches
    layer_weighting: str = "signed"
    node_attention: bool = True
    random_seed: int = 0
    # regularization knobs, off by default
    attn_dropout: float = 0.0
    mask_dropout: float = 0.0
    zero_attention_token: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(f"hidden width {self.hidden} is not divisible by {self.heads} heads")
        if self.hidden % 2:
            raise ConfigError(f"hidden width must be even for the positional table, got {self.hidden}")
        if self.mix_mode not in ("fixed", "learnable"):
            raise ConfigError(f"mix_mode must be 'fixed' or 'learnable', got {self.mix_mode!r}")
        if not 0.0 <= self.mix_alpha <= 1.0:
            raise ConfigError(f"fixed mix alpha must lie in [0, 1], got {self.mix_alpha}")
        if self.task_mode not in ("graph", "node"):
            raise ConfigError(f"task_mode must be 'graph' or 'node', got {self.task_mode!r}")
        if self.layer_weighting not in LAYER_WEIGHTINGS:
            raise ConfigError(f"layer_weighting must be one of {LAYER_WEIGHTINGS}")
        if self.norm_epsilon <= 0:
            raise ConfigError("norm_epsilon must be positive")
        for name in ("attn_dropout", "mask_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")


@dataclass
class LayerWeights:
    """Per-graph layer weights ``alpha`` (G x L) and the raw averaged scores ``scores``."""

    alpha: Tensor
    scores: Tensor
    fallback: np.ndarray


@dataclass
class PoolDetails:
    projected: Tensor
    weights: LayerWeights
    pooled_nodes: Tensor
    node_output: Tensor


def init_pool_params(in_dim: int, config: PoolConfig, rng: np.random.Generator, dtype=None,
                     prefix: str = "pool.") -> ParamStore:
    dtype = np.dtype(dtype or nc.get_default_dtype())
    d = config.hidden
    store = ParamStore()
    store.add(f"{prefix}hist.weight", nc.glorot_uniform(rng, in_dim, d, dtype))
    store.add(f"{prefix}hist.bias", np.zeros(d, dtype))
    store.add(f"{prefix}wq", nc.glorot_uniform(rng, d, d, dtype))
    store.add(f"{prefix}wk", nc.glorot_uniform(rng, d, d, dtype))
    for part in ("q", "k", "v", "out"):
        store.add(f"{prefix}mhsa.{part}.weight", nc.glorot_uniform(rng, d, d, dtype))
        # a key bias shifts every logit of a query row equally, so softmax ignores it
        if part != "k":
            store.add(f"{prefix}mhsa.{part}.bias", np.zeros(d, dtype))
    store.add(f"{prefix}ln.gamma", np.ones(d, dtype))
    store.add(f"{prefix}ln.beta", np.zeros(d, dtype))
    if config.mix_mode == "learnable":
        store.add(f"{prefix}mix_logit", np.zeros((), dtype))
    return store


def positional_encoding(num_layers: int, width: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal table: ``P[l, 2k] = sin(l / 10000^(2k/D))``, ``P[l, 2k+1] = cos(...)``."""
    if width % 2:
        raise ConfigError(f"positional encoding width must be even, got {width}")
    pos = np.arange(num_layers, dtype=np.float64)[:, None]
    two_k = np.arange(0, width, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_k / width)
    table = np.empty((num_layers, width))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table.astype(dtype)


def project_history(history: Tensor, params, prefix: str = "pool.") -> Tensor:
    """Shared affine map on every (node, layer) slice, plus the layer positional table."""
    weight, bias = params[f"{prefix}hist.weight"], params[f"{prefix}hist.bias"]
    n, num_layers, d_in = history.shape
    if d_in != weight.shape[0]:
        raise ShapeError(f"history width {d_in} does not match projection {weight.shape}")
    flat = nc.reshape(history, (n * num_layers, d_in))
    projected = nc.reshape(nc.linear(flat, weight, bias), (n, num_layers, weight.shape[1]))
    table = positional_encoding(num_layers, weight.shape[1], dtype=projected.dtype)
    return nc.add(projected, table)


def signed_normalize(scores, eps: float = 1e-6) -> Tensor:
    """Divide scores by their sum over the last axis; uniform weights when ``|sum| < eps``."""
    scores = scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores, dtype=np.float64))
    num_layers = scores.shape[-1]
    fallback = np.abs(scores.data.sum(axis=-1, keepdims=True)) < eps
    total = nc.where(fallback, 1.0, nc.tsum(scores, axis=-1, keepdims=True))
    return nc.where(fallback, 1.0 / num_layers, nc.div(scores, total))


def _fixed_random_weights(num_layers: int, seed: int, dtype) -> np.ndarray:
    raw = np.random.default_rng([seed, num_layers]).random(num_layers)
    return (raw / raw.sum()).astype(dtype)


def layerwise_attention(xt: Tensor, node_graph_id, num_graphs: int, params, config: PoolConfig,
                        prefix: str = "pool.", pinned_alpha=None) -> tuple[LayerWeights, Tensor]:
    """Score layers against the final-layer query and pool each node's history.

    ``pinned_alpha`` (length L, or G x L) bypasses the learned weights; the
    raw scores are still computed and reported.
    """
    n, num_layers, d = xt.shape
    node_graph_id = np.asarray(node_graph_id)
    query = nc.matmul(xt[:, num_layers - 1, :], params[f"{prefix}wq"])
    keys = nc.reshape(nc.matmul(nc.reshape(xt, (n * num_layers, d)), params[f"{prefix}wk"]),
                      (n, num_layers, d))
    logits = nc.mul(nc.tsum(nc.mul(nc.reshape(query, (n, 1, d)), keys), axis=2), 1.0 / math.sqrt(d))
    pool = segment_mean_matrix(node_graph_id, num_graphs)
    scores = nc.sparse_matmul(pool, logits)

    fallback = np.zeros(num_graphs, dtype=bool)
    if pinned_alpha is not None:
        pinned = np.broadcast_to(np.asarray(pinned_alpha, dtype=xt.dtype), (num_graphs, num_layers))
        alpha = Tensor(np.array(pinned), dtype=xt.dtype)
    elif config.layer_weighting == "signed":
        fallback = np.abs(scores.data.sum(axis=-1)) < config.norm_epsilon
        alpha = signed_normalize(scores, config.norm_epsilon)
    elif config.layer_weighting == "raw":
        alpha = scores
    elif config.layer_weighting == "uniform":
        alpha = Tensor(np.full((num_graphs, num_layers), 1.0 / num_layers), dtype=xt.dtype)
    else:
        fixed = _fixed_random_weights(num_layers, config.random_seed, xt.dtype)
        alpha = Tensor(np.tile(fixed, (num_graphs, 1)), dtype=xt.dtype)

    per_node = nc.reshape(alpha[node_graph_id], (n, num_layers, 1))
    pooled = nc.tsum(nc.mul(per_node, xt), axis=1)
    return LayerWeights(alpha, scores, fallback), pooled


def same_graph_mask(node_graph_id) -> np.ndarray:
    ids = np.asarray(node_graph_id)
    return ids[:, None] == ids[None, :]


def graph_slots(node_graph_id) -> tuple[np.ndarray, np.ndarray]:
    """Padded per-graph layout of a node batch.

    Returns ``(slot, table)``: ``slot[i]`` is node i's position inside its graph and
    ``table[g, s]`` the node in slot s of graph g, or ``n`` where graph g has fewer nodes.
    """
    ids = np.asarray(node_graph_id, dtype=np.int64)
    n = len(ids)
    counts = np.bincount(ids, minlength=int(ids.max()) + 1 if n else 0)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    order = np.argsort(ids, kind="stable")
    slot = np.empty(n, dtype=np.int64)
    slot[order] = np.arange(n) - np.repeat(starts, counts)
    table = np.full((len(counts), max(int(counts.max(initial=0)), 1)), n, dtype=np.int64)
    table[ids, slot] = np.arange(n)
    return slot, table


def nodewise_mhsa(h: Tensor, node_graph_id, params, config: PoolConfig, prefix: str = "pool.",
                  training: bool = False, rng: np.random.Generator | None = None,
                  return_attention: bool = False):
    """Multi-head self-attention restricted to nodes of the same graph.

    Nodes are gathered into a zero-padded ``G x S`` layout (S = largest graph) so the
    cost is ``G * S^2`` rather than quadratic in the whole batch. With
    ``return_attention`` the weights are also returned as a dense ``heads x n x n`` map.
    """
    n, d = h.shape
    heads = config.heads
    if d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    dh = d // heads
    ids = np.asarray(node_graph_id, dtype=np.int64)
    slot, table = graph_slots(ids)
    num_graphs, width = table.shape
    pad = Tensor(np.zeros((1, heads, dh), dtype=h.dtype))

    def split(part):
        proj = nc.linear(h, params[f"{prefix}mhsa.{part}.weight"], params.get(f"{prefix}mhsa.{part}.bias"))
        rows = nc.concat([nc.reshape(proj, (n, heads, dh)), pad], axis=0)[table]
        return nc.transpose(rows, (0, 2, 1, 3))  # G x heads x S x dh

    q, k, v = split("q"), split("k"), split("v")
    logits = nc.mul(nc.matmul(q, nc.swapaxes(k, 2, 3)), 1.0 / math.sqrt(dh))
    real = table < n
    base = np.broadcast_to(real[:, None, None, :], (num_graphs, heads, width, width))
    mask = base
    if training and config.mask_dropout > 0:
        rng = rng or np.random.default_rng()
        drop = rng.random(mask.shape) < config.mask_dropout
        drop &= ~np.eye(width, dtype=bool)
        mask = mask & ~drop
        # padded query rows can lose every key; they are discarded but must stay finite
        mask = np.where(mask.any(axis=-1, keepdims=True), mask, base)
    if config.zero_attention_token:
        zeros = Tensor(np.zeros((num_graphs, heads, width, 1), dtype=h.dtype))
        logits = nc.concat([logits, zeros], axis=3)
        mask = np.concatenate([mask, np.ones((num_graphs, heads, width, 1), dtype=bool)], axis=3)
    attn = nc.softmax(logits, axis=-1, mask=mask)
    if config.zero_attention_token:
        attn = attn[:, :, :, :width]
    if training and config.attn_dropout > 0:
        rng = rng or np.random.default_rng()
        keep = (rng.random(attn.shape) >= config.attn_dropout).astype(h.dtype)
        attn = nc.mul(attn, keep * (1.0 / (1.0 - config.attn_dropout)))
    mixed = nc.reshape(nc.transpose(nc.matmul(attn, v), (0, 2, 1, 3)), (num_graphs * width, d))
    mixed = mixed[ids * width + slot]
    out = nc.linear(mixed, params[f"{prefix}mhsa.out.weight"], params[f"{prefix}mhsa.out.bias"])
    if config.use_residual:
        out = nc.add(h, out)
    if config.use_layernorm:
        out = nc.layer_norm(out, params[f"{prefix}ln.gamma"], params[f"{prefix}ln.beta"], config.ln_eps)
    if return_attention:
        dense = np.zeros((heads, n + 1, n + 1), dtype=attn.dtype)
        dense[:, table[:, :, None], table[:, None, :]] = np.transpose(attn.data, (1, 0, 2, 3))
        return out, Tensor(dense[:, :n, :n], dtype=attn.dtype)
    return out


def graph_readout(z: Tensor, node_graph_id, num_graphs: int | None = None) -> Tensor:
    """Per-graph mean of node rows."""
    ids = np.asarray(node_graph_id)
    if num_graphs is None:
        num_graphs = int(ids.max()) + 1
    return nc.sparse_matmul(segment_mean_matrix(ids, num_graphs), z)


def histograph_forward(history: ActivationHistory, params, config: PoolConfig, prefix: str = "pool.",
                       training: bool = False, rng: np.random.Generator | None = None,
                       pinned_alpha=None, return_details: bool = False):
    """Projection, layer-wise attention, node-wise attention, then (graph mode) averaging."""
    xt = project_history(history.tensor, params, prefix)
    weights, pooled = layerwise_attention(xt, history.node_graph_id, history.num_graphs, params,
                                          config, prefix, pinned_alpha)
    if config.node_attention:
        z = nodewise_mhsa(pooled, history.node_graph_id, params, config, prefix, training, rng)
    else:
        z = pooled
    out = graph_readout(z, history.node_graph_id, history.num_graphs) if config.task_mode == "graph" else z
    if return_details:
        return out, PoolDetails(xt, weights, pooled, z)
    return out


def mix_weight(config: PoolConfig, params, prefix: str = "pool.") -> Tensor:
    if config.mix_mode == "fixed":
        return Tensor(np.asarray(config.mix_alpha))
    return nc.sigmoid(params[f"{prefix}mix_logit"])


def mix_with_mean(y_hg: Tensor, y_mean: Tensor, config: PoolConfig, params=None,
                  prefix: str = "pool.") -> Tensor:
    """Convex combination ``a * y_hg + (1 - a) * y_mean``."""
    if y_hg.shape != y_mean.shape:
        raise ShapeError(f"mix operands differ in shape: {y_hg.shape} vs {y_mean.shape}")
    if config.mix_mode == "fixed":
        a = float(config.mix_alpha)
        return nc.add(nc.mul(y_hg, a), nc.mul(y_mean, 1.0 - a))
    a = nc.sigmoid(params[f"{prefix}mix_logit"])
    return nc.add(nc.mul(y_hg, a), nc.mul(y_mean, nc.sub(1.0, a)))
