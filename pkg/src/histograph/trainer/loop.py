"""Training, frozen-backbone fine-tuning, activation caching and evaluation."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import numcore as nc
from ..backbone import ActivationHistory, BackboneConfig
from ..errors import ConfigError, ContractError, DivergenceError
from ..graphdata import Graph, batch_graphs
from ..histopool import PoolConfig, init_pool_params
from ..model import GraphModel, ModelConfig, init_head_params, init_params, task_level
from ..numcore import ParamStore, Tensor
from .losses import accuracy, loss_fn, roc_auc
from .optim import Adam
from .storage import ActivationCache, CachedGraph, Checkpoint


TRAIN_TASKS = ("graph_class", "node_class", "node_regress")
MODES = ("end_to_end", "ft_frozen", "full_ft")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.01
    weight_decay: float = 0.0
    seed: int = 0
    task: str = "graph_class"
    readout: str = "histograph"
    backbone: str = "gin"
    layers: int = 5
    hidden: int = 32
    pool: PoolConfig = field(default_factory=PoolConfig)
    mode: str = "end_to_end"
    cache_path: str | None = None
    checkpoint_path: str | None = None
    val_fraction: float = 0.2
    precision: str = "single"
    eval_every: int = 1

    def __post_init__(self):
        if isinstance(self.pool, dict):
            self.pool = PoolConfig(**self.pool)
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.task not in TRAIN_TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TRAIN_TASKS}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "ft_frozen" and not (self.cache_path or self.checkpoint_path):
            raise ConfigError("ft_frozen mode needs a cache path or a checkpoint")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.precision not in ("single", "high"):
            raise ConfigError(f"unknown precision {self.precision!r}; expected 'single' or 'high'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def model_config(self, in_dim: int, num_outputs: int, readout: str | None = None) -> ModelConfig:
        pool = PoolConfig(**{**asdict(self.pool), "hidden": self.hidden})
        return ModelConfig(BackboneConfig(self.backbone, self.layers, in_dim, self.hidden), pool,
                           readout or self.readout, self.task, num_outputs)


# data plumbing


def _target_attr(task: str) -> str:
    return {"graph_class": "label", "node_class": "node_labels", "node_regress": "node_targets"}[task]


def check_task_data(items: Sequence, task: str) -> None:
    attr = _target_attr(task)
    missing = [i for i, g in enumerate(items) if getattr(g, attr) is None]
    if missing:
        raise ContractError(f"task {task!r} needs {attr!r} on every graph; graph {missing[0]} has none")


def num_outputs_for(items: Sequence, task: str) -> int:
    check_task_data(items, task)
    if task == "graph_class":
        return max(2, max(int(g.label) for g in items) + 1)
    if task == "node_class":
        return max(2, max(int(np.max(g.node_labels)) for g in items) + 1)
    return int(np.asarray(items[0].node_targets).reshape(len(items[0].node_targets), -1).shape[1])


@dataclass
class _Split:
    train_graphs: list[int]
    val_graphs: list[int]
    # node tasks: per-graph boolean masks over nodes
    train_masks: list[np.ndarray] | None = None
    val_masks: list[np.ndarray] | None = None


def _node_count(item) -> int:
    return item.num_nodes if isinstance(item, Graph) else item.history.shape[0]


def make_split(items: Sequence, task: str, val_fraction: float, seed: int) -> _Split:
    """Seeded 80/20-style split: of graphs for graph tasks, of nodes for node tasks."""
    rng = np.random.default_rng([seed, 0xA11])
    all_graphs = list(range(len(items)))
    if task_level(task) == "graph":
        if val_fraction == 0 or len(items) < 2:
            return _Split(all_graphs, [])
        perm = rng.permutation(len(items))
        n_val = max(1, int(round(val_fraction * len(items))))
        return _Split(sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist()))
    sizes = [_node_count(g) for g in items]
    total = int(np.sum(sizes))
    is_val = np.zeros(total, dtype=bool)
    if val_fraction > 0 and total > 1:
        n_val = max(1, int(round(val_fraction * total)))
        is_val[rng.permutation(total)[:n_val]] = True
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    train_masks = [~is_val[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]
    val_masks = [is_val[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]
    return _Split(all_graphs, [i for i in all_graphs if val_masks[i].any()], train_masks, val_masks)


def _gather_targets(items: Sequence, idx: Sequence[int], task: str):
    attr = _target_attr(task)
    if task == "graph_class":
        return np.array([items[i].label for i in idx], dtype=np.int64)
    parts = [np.asarray(getattr(items[i], attr)) for i in idx]
    out = np.concatenate(parts)
    return out.reshape(len(out), -1) if task == "node_regress" else out.astype(np.int64)


def stack_cached(items: Sequence[CachedGraph], idx: Sequence[int], dtype) -> ActivationHistory:
    hists = [items[i].history for i in idx]
    ids = np.repeat(np.arange(len(hists)), [h.shape[0] for h in hists])
    return ActivationHistory(Tensor(np.concatenate(hists).astype(dtype, copy=False), dtype=dtype),
                             ids, len(hists))


class _Runner:
    """Shared forward/loss/metric logic over either raw graphs or cached histories."""

    def __init__(self, model: GraphModel, items: Sequence, task: str):
        self.model = model
        self.items = items
        self.task = task
        self.cached = bool(items) and isinstance(items[0], CachedGraph)
        self._batch_cache: dict[tuple, object] = {}

    def _inputs(self, idx: tuple):
        key = tuple(idx)
        if key not in self._batch_cache:
            if len(self._batch_cache) > 64:
                self._batch_cache.clear()
            if self.cached:
                self._batch_cache[key] = stack_cached(self.items, idx, self.model.dtype)
            else:
                self._batch_cache[key] = batch_graphs([self.items[i] for i in idx])
        return self._batch_cache[key]

    def forward(self, idx, training=False, rng=None):
        data = self._inputs(tuple(idx))
        if self.cached:
            return self.model.forward_from_history(data, training, rng)
        return self.model.forward(data, training, rng)

    def selection(self, idx, masks):
        if masks is None:
            return None
        return np.flatnonzero(np.concatenate([masks[i] for i in idx]))

    def loss(self, logits: Tensor, idx, masks):
        targets = _gather_targets(self.items, idx, self.task)
        sel = self.selection(idx, masks)
        if sel is not None:
            logits = logits[sel]
            targets = targets[sel]
        return loss_fn(self.task, logits, targets), logits.data, targets

    def score(self, graphs: list[int], masks, batch_size: int) -> dict:
        """Loss and task metric over the selected graphs/nodes, without recording a tape."""
        if not graphs:
            return {}
        all_logits, all_targets, losses, weights = [], [], [], []
        with nc.no_grad():
            for lo in range(0, len(graphs), batch_size):
                idx = graphs[lo:lo + batch_size]
                logits, _ = self.forward(idx)
                loss, lg, tg = self.loss(logits, idx, masks)
                if len(tg) == 0:
                    continue
                losses.append(loss.item())
                weights.append(len(tg))
                all_logits.append(lg)
                all_targets.append(tg)
        if not weights:
            return {}
        logits = np.concatenate(all_logits)
        targets = np.concatenate(all_targets)
        out = {"loss": float(np.average(losses, weights=weights))}
        out.update(task_metrics(self.task, logits, targets))
        return out


def task_metrics(task: str, logits: np.ndarray, targets: np.ndarray) -> dict:
    if task == "node_regress":
        diff = logits.astype(np.float64) - targets.reshape(logits.shape)
        return {"mse": float(np.mean(diff * diff))}
    out = {"accuracy": accuracy(logits, targets)}
    if logits.shape[1] == 2:
        z = logits.astype(np.float64)
        out["roc_auc"] = roc_auc(z[:, 1] - z[:, 0], targets == 1)
    return out


def _fit(model: GraphModel, items: Sequence, config: TrainConfig,
         on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    runner = _Runner(model, items, config.task)
    split = make_split(items, config.task, config.val_fraction, config.seed)
    opt = Adam(model.params, lr=config.lr, weight_decay=config.weight_decay)
    order_rng = np.random.default_rng([config.seed, 0x5F])
    drop_rng = np.random.default_rng([config.seed, 0xD0])
    train = list(split.train_graphs)
    full_batch = config.batch_size >= len(train)
    metrics: list[dict] = []
    last_finite = None

    for epoch in range(1, config.epochs + 1):
        order = train if full_batch else [train[i] for i in order_rng.permutation(len(train))]
        start = time.perf_counter()
        loss_sum, loss_weight = 0.0, 0
        alpha_sum = score_sum = None
        alpha_count = 0
        for lo in range(0, len(order), config.batch_size):
            idx = sorted(order[lo:lo + config.batch_size]) if full_batch else order[lo:lo + config.batch_size]
            opt.zero_grad()
            logits, details = runner.forward(idx, training=True, rng=drop_rng)
            loss, _, targets = runner.loss(logits, idx, split.train_masks)
            if len(targets) == 0:
                continue
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}; last finite epoch: {last_finite}",
                    last_finite)
            nc.backward(loss)
            opt.step()
            loss_sum += value * len(targets)
            loss_weight += len(targets)
            if details is not None:
                a = details.weights.alpha.data.astype(np.float64)
                c = details.weights.scores.data.astype(np.float64)
                alpha_sum = a.sum(0) if alpha_sum is None else alpha_sum + a.sum(0)
                score_sum = c.sum(0) if score_sum is None else score_sum + c.sum(0)
                alpha_count += a.shape[0]
        record = {"epoch": epoch, "epoch_time": time.perf_counter() - start,
                  "train_loss": loss_sum / max(loss_weight, 1), "skipped_steps": opt.skipped}
        if alpha_count:
            record["alpha"] = (alpha_sum / alpha_count).tolist()
            record["scores"] = (score_sum / alpha_count).tolist()
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            for prefix, graphs, masks in (("train_", train, split.train_masks),
                                          ("val_", split.val_graphs, split.val_masks)):
                for k, v in runner.score(graphs, masks, max(config.batch_size, 1)).items():
                    record[f"{prefix}eval_{k}" if k == "loss" else prefix + k] = v
        last_finite = epoch
        metrics.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return metrics


def _snapshot(model: GraphModel, config: TrainConfig, metrics: list[dict]) -> Checkpoint:
    return Checkpoint(
        params={k: np.array(v.data, dtype=np.float32) for k, v in model.params.items()},
        config={"train": config.to_dict(), "model": model.config.to_dict()},
        epoch=metrics[-1]["epoch"] if metrics else 0,
        history=metrics,
    )


def model_from_checkpoint(checkpoint: Checkpoint, precision: str = "single") -> GraphModel:
    config = ModelConfig.from_dict(checkpoint.config["model"])
    dtype = nc.dtype_for(precision)
    params = ParamStore.from_arrays(checkpoint.params, dtype=dtype)
    return GraphModel(config, params)


def _load_checkpoint(config: TrainConfig, checkpoint: Checkpoint | None) -> Checkpoint | None:
    if checkpoint is not None:
        return checkpoint
    if config.checkpoint_path:
        return Checkpoint.load(config.checkpoint_path)
    return None


def train(dataset: Sequence[Graph], config: TrainConfig, checkpoint: Checkpoint | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """End-to-end or full fine-tuning run (``ft_frozen`` delegates to :func:`finetune_head`).

    ``full_ft`` copies every checkpoint tensor whose name and shape match the
    new model (typically the backbone) and initializes the rest fresh.
    """
    if not dataset:
        raise ContractError("cannot train on an empty dataset")
    config.validate()
    check_task_data(dataset, config.task)
    source = _load_checkpoint(config, checkpoint)
    if config.mode == "ft_frozen":
        if source is None:
            cache = ActivationCache.load(config.cache_path)
        else:
            cache = cache_activations(dataset, source)
        ckpt = finetune_head(cache, config, source)
        return ckpt, ckpt.history
    if config.mode == "full_ft" and source is None:
        raise ConfigError("full_ft mode needs a checkpoint to start from")

    dtype = nc.dtype_for(config.precision)
    mcfg = config.model_config(dataset[0].in_dim, num_outputs_for(dataset, config.task))
    params = init_params(mcfg, config.seed, dtype)
    if source is not None:
        for name, arr in source.params.items():
            if name in params and params[name].shape == arr.shape:
                params[name].data = np.array(arr, dtype=dtype)
    model = GraphModel(mcfg, params)
    metrics = _fit(model, dataset, config, on_epoch)
    return _snapshot(model, config, metrics), metrics


def cache_activations(dataset: Sequence[Graph], checkpoint: Checkpoint, path=None) -> ActivationCache:
    """One backbone forward per graph; histories stored as float32."""
    model = model_from_checkpoint(checkpoint, "single")
    expected = model.config.backbone.in_dim
    cache = ActivationCache()
    with nc.no_grad():
        for i, g in enumerate(dataset):
            if g.in_dim != expected:
                raise ContractError(f"graph {i} has feature width {g.in_dim}; backbone expects {expected}")
            hist = model.history(batch_graphs([g])).tensor.data
            cache.graphs.append(CachedGraph(np.array(hist, dtype=np.float32), g.label,
                                            g.node_labels, g.node_targets))
    if path is not None:
        cache.save(path)
    return cache


def finetune_head(cache: ActivationCache, config: TrainConfig, checkpoint: Checkpoint | None = None,
                  on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Train a fresh readout head on cached histories only.

    With the HistoGraph readout both pool and classifier are trained; other
    readouts (the frozen MeanPool baseline, say) train the classifier alone.
    Backbone tensors from ``checkpoint`` are carried into the result untouched.
    """
    if config.mode != "ft_frozen":
        raise ContractError(f"finetune_head requires mode 'ft_frozen', got {config.mode!r}")
    if len(cache) == 0:
        raise ContractError("activation cache is empty")
    num_layers, width = cache.shape
    if any(g.history.shape[1:] != (num_layers, width) for g in cache.graphs):
        raise ContractError("cached histories disagree on L x D")
    source = _load_checkpoint(config, checkpoint)
    if source is not None:
        backbone = BackboneConfig(**source.config["model"]["backbone"])
    else:
        backbone = BackboneConfig(config.backbone, config.layers, width, config.hidden)
    if backbone.num_layers != num_layers or backbone.hidden != width:
        raise ContractError(f"cache holds L={num_layers}, D={width}; backbone has "
                            f"L={backbone.num_layers}, D={backbone.hidden}")
    check_task_data(cache.graphs, config.task)

    dtype = nc.dtype_for(config.precision)
    pool = PoolConfig(**{**asdict(config.pool), "hidden": config.hidden})
    mcfg = ModelConfig(backbone, pool, config.readout, config.task, num_outputs_for(cache.graphs, config.task))
    rng = np.random.default_rng(config.seed)
    params = ParamStore()
    if source is not None:
        for name, arr in source.params.items():
            if name.startswith("backbone."):
                params.add(name, np.array(arr, dtype=dtype))
    params.freeze("backbone.")
    if mcfg.readout == "histograph":
        params.update(init_pool_params(width, mcfg.pool, rng, dtype))
    params.update(init_head_params(mcfg, rng, dtype))
    model = GraphModel(mcfg, params)
    metrics = _fit(model, cache.graphs, config, on_epoch)
    return _snapshot(model, config, metrics)


def evaluate(dataset: Sequence[Graph], checkpoint: Checkpoint, batch_size: int = 64,
             precision: str = "single") -> dict:
    """Loss plus accuracy (and ROC-AUC for two classes) or MSE, over every graph/node."""
    task = checkpoint.config["model"]["task"]
    check_task_data(dataset, task)
    model = model_from_checkpoint(checkpoint, precision)
    if dataset and dataset[0].in_dim != model.config.backbone.in_dim:
        raise ContractError("dataset feature width does not match the checkpoint backbone")
    runner = _Runner(model, list(dataset), task)
    return runner.score(list(range(len(dataset))), None, batch_size)
