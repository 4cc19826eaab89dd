"""Message-passing backbones that record every layer's node embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ShapeError
from .graphdata import GraphBatch, sum_adjacency
from .numcore import ParamStore, Tensor

BACKBONE_KINDS = ("gcn", "gin")


@dataclass
class ActivationHistory:
    """Node embeddings of every layer, shape ``N_total x L x D``."""

    tensor: Tensor
    node_graph_id: np.ndarray
    num_graphs: int

    @property
    def num_layers(self) -> int:
        return self.tensor.shape[1]

    @property
    def width(self) -> int:
        return self.tensor.shape[2]

    @property
    def num_nodes(self) -> int:
        return self.tensor.shape[0]

    @property
    def offsets(self) -> np.ndarray:
        counts = np.bincount(self.node_graph_id, minlength=self.num_graphs)
        return np.concatenate([[0], np.cumsum(counts)])

    def layer(self, index: int) -> Tensor:
        return self.tensor[:, index, :]

    @classmethod
    def from_array(cls, array, node_graph_id=None, requires_grad=False, dtype=None) -> "ActivationHistory":
        array = np.asarray(array)
        ids = np.zeros(array.shape[0], np.int64) if node_graph_id is None else np.asarray(node_graph_id)
        t = Tensor(array, requires_grad=requires_grad, dtype=dtype)
        return cls(t, ids, int(ids.max()) + 1 if len(ids) else 0)


@dataclass
class BackboneConfig:
    kind: str = "gin"
    num_layers: int = 5
    in_dim: int = 1
    hidden: int = 32
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError(f"unknown backbone {self.kind!r}; expected one of {BACKBONE_KINDS}")
        if self.num_layers < 1:
            raise ConfigError("backbone needs at least one layer (the input embedding)")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


_ACTIVATIONS = {"relu": nc.relu, "tanh": nc.tanh, "identity": lambda x: x}


def init_backbone_params(config: BackboneConfig, rng: np.random.Generator, dtype=None,
                         prefix: str = "backbone.") -> ParamStore:
    """Glorot-uniform weights, zero biases, GIN eps at zero."""
    dtype = np.dtype(dtype or nc.get_default_dtype())
    d = config.hidden
    store = ParamStore()
    store.add(f"{prefix}embed.weight", nc.glorot_uniform(rng, config.in_dim, d, dtype))
    store.add(f"{prefix}embed.bias", np.zeros(d, dtype))
    for layer in range(1, config.num_layers):
        p = f"{prefix}layers.{layer}."
        if config.kind == "gcn":
            store.add(p + "weight", nc.glorot_uniform(rng, d, d, dtype))
        else:
            store.add(p + "eps", np.zeros((), dtype))
            store.add(p + "mlp1.weight", nc.glorot_uniform(rng, d, d, dtype))
            store.add(p + "mlp1.bias", np.zeros(d, dtype))
            store.add(p + "mlp2.weight", nc.glorot_uniform(rng, d, d, dtype))
            store.add(p + "mlp2.bias", np.zeros(d, dtype))
    return store


def input_embed(features: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if features.shape[-1] != weight.shape[0]:
        raise ShapeError(f"input width {features.shape[-1]} does not match embedding {weight.shape}")
    return nc.linear(features, weight, bias)


def gcn_layer(x: Tensor, adjacency, weight: Tensor, activation=nc.relu) -> Tensor:
    """``act(Ahat @ X @ W)`` with ``adjacency`` a sparse normalized operator."""
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"gcn_layer: features {x.shape} vs weight {weight.shape}")
    return activation(nc.sparse_matmul(adjacency, nc.matmul(x, weight)))


def gin_layer(x: Tensor, neighbor_sum, eps: Tensor, mlp: dict, activation=nc.relu) -> Tensor:
    """``MLP((1 + eps) x_v + sum_{u ~ v} x_u)`` with a two-layer MLP.

    ``neighbor_sum`` is the binary adjacency (sparse) or a Graph/GraphBatch.
    """
    if not hasattr(neighbor_sum, "tocsr"):
        neighbor_sum = sum_adjacency(neighbor_sum)
    agg = nc.add(nc.mul(nc.add(eps, 1.0), x), nc.sparse_matmul(neighbor_sum, x))
    hidden = activation(nc.linear(agg, mlp["mlp1.weight"], mlp["mlp1.bias"]))
    return nc.linear(hidden, mlp["mlp2.weight"], mlp["mlp2.bias"])


def forward_with_history(batch: GraphBatch, params: ParamStore, config: BackboneConfig,
                         prefix: str = "backbone.") -> ActivationHistory:
    """Run the embedding plus ``L - 1`` message-passing layers and stack all ``L`` outputs."""
    dtype = params[f"{prefix}embed.weight"].dtype
    act = _ACTIVATIONS[config.activation]
    feats = Tensor(batch.features, dtype=dtype)
    x = input_embed(feats, params[f"{prefix}embed.weight"], params[f"{prefix}embed.bias"])
    layers = [x]
    if config.num_layers > 1:
        if config.kind == "gcn":
            adj = batch.sparse("gcn_adjacency", dtype)
        else:
            adj = batch.sparse("neighbor_sum", dtype)
    for layer in range(1, config.num_layers):
        p = f"{prefix}layers.{layer}."
        if config.kind == "gcn":
            x = gcn_layer(x, adj, params[p + "weight"], act)
        else:
            mlp = {k: params[p + k] for k in ("mlp1.weight", "mlp1.bias", "mlp2.weight", "mlp2.bias")}
            x = gin_layer(x, adj, params[p + "eps"], mlp, act)
        layers.append(x)
    return ActivationHistory(nc.stack(layers, axis=1), batch.node_graph_id, batch.num_graphs)
