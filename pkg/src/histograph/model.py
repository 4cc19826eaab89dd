"""Backbone + readout + linear prediction head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .backbone import ActivationHistory, BackboneConfig, forward_with_history, init_backbone_params
from .baselines import canonical_readout, jk_concat, node_readout, pool_last_layer, readout_width
from .errors import ConfigError
from .graphdata import GraphBatch, segment_mean_matrix
from .histopool import (PoolConfig, PoolDetails, histograph_forward, init_pool_params, mix_with_mean,
                        positional_encoding)
from .numcore import ParamStore, Tensor

TASKS = ("graph_class", "node_class", "node_regress", "multilabel")


def task_level(task: str) -> str:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    return "graph" if task in ("graph_class", "multilabel") else "node"


@dataclass
class ModelConfig:
    backbone: BackboneConfig
    pool: PoolConfig = field(default_factory=PoolConfig)
    readout: str = "histograph"
    task: str = "graph_class"
    num_outputs: int = 2

    def __post_init__(self):
        self.readout = canonical_readout(self.readout)
        self.pool.task_mode = task_level(self.task)
        self.pool.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(BackboneConfig(**d["backbone"]), PoolConfig(**d["pool"]),
                   d["readout"], d["task"], d["num_outputs"])

    @property
    def readout_dim(self) -> int:
        if self.readout == "histograph":
            return self.pool.hidden
        return readout_width(self.readout, self.backbone.num_layers, self.backbone.hidden)


def init_head_params(config: ModelConfig, rng: np.random.Generator, dtype) -> ParamStore:
    store = ParamStore()
    store.add("head.weight", nc.glorot_uniform(rng, config.readout_dim, config.num_outputs, dtype))
    store.add("head.bias", np.zeros(config.num_outputs, dtype))
    return store


def init_params(config: ModelConfig, seed: int = 0, dtype=None) -> ParamStore:
    """Backbone, pool (histograph only) and head parameters from one seeded generator."""
    dtype = np.dtype(dtype or nc.get_default_dtype())
    rng = np.random.default_rng(seed)
    store = init_backbone_params(config.backbone, rng, dtype)
    if config.readout == "histograph":
        store.update(init_pool_params(config.backbone.hidden, config.pool, rng, dtype))
    store.update(init_head_params(config, rng, dtype))
    return store


class GraphModel:
    """Callable model; parameters live in ``self.params``."""

    def __init__(self, config: ModelConfig, params: ParamStore | None = None, seed: int = 0, dtype=None):
        self.config = config
        self.params = params if params is not None else init_params(config, seed, dtype)

    @property
    def dtype(self):
        return self.params["head.weight"].dtype

    def history(self, batch: GraphBatch) -> ActivationHistory:
        return forward_with_history(batch, self.params, self.config.backbone)

    def readout(self, history: ActivationHistory, training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, PoolDetails | None]:
        cfg = self.config
        level = task_level(cfg.task)
        if cfg.readout != "histograph":
            if level == "node":
                return node_readout(cfg.readout, history), None
            if cfg.readout == "jk_concat":
                return jk_concat(history), None
            return pool_last_layer(cfg.readout, history), None
        y_hg, details = histograph_forward(history, self.params, cfg.pool, training=training,
                                           rng=rng, return_details=True)
        y_mean = self._mean_path(history, details)
        return mix_with_mean(y_hg, y_mean, cfg.pool, self.params), details

    def _mean_path(self, history: ActivationHistory, details: PoolDetails) -> Tensor:
        last = history.num_layers - 1
        if history.width == self.config.pool.hidden:
            final = history.layer(last)
        else:
            # widths differ: use the projected final layer without its positional row
            num_layers, width = details.projected.shape[1:]
            table_row = positional_encoding(num_layers, width, details.projected.dtype)[last]
            final = nc.sub(details.projected[:, last, :], table_row)
        if task_level(self.config.task) == "node":
            return final
        return nc.sparse_matmul(segment_mean_matrix(history.node_graph_id, history.num_graphs), final)

    def head(self, features: Tensor) -> Tensor:
        return nc.linear(features, self.params["head.weight"], self.params["head.bias"])

    def forward_from_history(self, history: ActivationHistory, training: bool = False,
                             rng: np.random.Generator | None = None):
        features, details = self.readout(history, training, rng)
        return self.head(features), details

    def forward(self, batch: GraphBatch, training: bool = False, rng: np.random.Generator | None = None):
        return self.forward_from_history(self.history(batch), training, rng)

    def __call__(self, batch: GraphBatch, training: bool = False, rng=None) -> Tensor:
        return self.forward(batch, training, rng)[0]

