"""Probes over trained runs: feature distance, drift, attention traces, timing.

Every probe is read-only. Series are written as CSV with the header
``name,x,value,seed,config_hash``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from . import numcore as nc
from .backbone import ActivationHistory
from .errors import ContractError
from .histopool import PoolConfig, histograph_forward, init_pool_params

CSV_HEADER = ("name", "x", "value", "seed", "config_hash")


def config_hash(config) -> str:
    """Short stable digest of a JSON-serializable config (dataclasses via ``to_dict``)."""
    if hasattr(config, "to_dict"):
        config = config.to_dict()
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


@dataclass
class DiagnosticSeries:
    name: str
    x: list
    values: list
    seed: int = 0
    config_hash: str = ""

    def __post_init__(self):
        self.x = [float(v) if not float(v).is_integer() else int(v) for v in self.x]
        self.values = [float(v) for v in self.values]
        if len(self.x) != len(self.values):
            raise ContractError(f"series {self.name!r}: {len(self.x)} x values vs {len(self.values)} values")
        if any(b <= a for a, b in zip(self.x, self.x[1:])):
            raise ContractError(f"series {self.name!r}: x must be strictly increasing")
        if not all(np.isfinite(self.values)):
            raise ContractError(f"series {self.name!r}: values must be finite")

    def rows(self):
        for x, v in zip(self.x, self.values):
            yield (self.name, x, repr(v), self.seed, self.config_hash)


def write_csv(series: Iterable[DiagnosticSeries], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for s in series:
            writer.writerows(s.rows())


def read_csv(path) -> list[DiagnosticSeries]:
    grouped: dict[tuple, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise ContractError(f"{path}: unexpected CSV header {header}")
        for name, x, value, seed, digest in reader:
            key = (name, int(seed), digest)
            s = grouped.setdefault(key, {"x": [], "values": []})
            s["x"].append(float(x))
            s["values"].append(float(value))
    return [DiagnosticSeries(n, s["x"], s["values"], seed, h) for (n, seed, h), s in grouped.items()]


# over-smoothing probes


def _array(hist) -> np.ndarray:
    if isinstance(hist, ActivationHistory):
        return np.asarray(hist.tensor.data, dtype=np.float64)
    return np.asarray(hist.data if isinstance(hist, nc.Tensor) else hist, dtype=np.float64)


def pairwise_distance(x, node_graph_id=None) -> float:
    """Mean pairwise L2 distance between rows of ``x`` within each graph, averaged over graphs.

    A single-node graph contributes 0.
    """
    x = _array(x)
    if x.ndim != 2:
        raise ContractError(f"expected an N x D matrix, got shape {x.shape}")
    ids = np.zeros(len(x), np.int64) if node_graph_id is None else np.asarray(node_graph_id)
    per_graph = []
    for g in np.unique(ids):
        rows = x[ids == g]
        per_graph.append(float(np.mean(pdist(rows))) if len(rows) > 1 else 0.0)
    if not per_graph:
        raise ContractError("no nodes to measure")
    return float(np.mean(per_graph))


def feature_distance(hist: ActivationHistory, layer: int) -> float:
    """Mean within-graph pairwise distance of the node rows of one history slice."""
    num_layers = hist.num_layers
    if not -num_layers <= layer < num_layers:
        raise ContractError(f"layer {layer} out of range for a history of {num_layers} layers")
    return pairwise_distance(_array(hist)[:, layer, :], hist.node_graph_id)


def embedding_drift(hist: ActivationHistory) -> np.ndarray:
    """Entry l: mean over nodes of ``||x_{L-1} - x_l||``; the last entry is 0."""
    x = _array(hist)
    if x.ndim != 3 or x.shape[1] < 1:
        raise ContractError(f"history must be N x L x D with L >= 1, got {x.shape}")
    return np.linalg.norm(x[:, -1:, :] - x, axis=2).mean(axis=0)


# run-level probes


def _records(run) -> tuple[list[dict], dict]:
    """Metric list and config dict from a Checkpoint, a ``(checkpoint, metrics)`` pair or a list."""
    if isinstance(run, tuple):
        run = run[0]
    if hasattr(run, "history") and hasattr(run, "params"):
        return list(run.history), dict(run.config)
    return list(run), {}


@dataclass
class AttentionTrace:
    epochs: np.ndarray
    alpha: np.ndarray   # epochs x L, averaged over graphs
    scores: np.ndarray  # raw c, same layout
    config_hash: str = ""
    seed: int = 0

    def series(self) -> list[DiagnosticSeries]:
        out = []
        for name, table in (("alpha", self.alpha), ("c", self.scores)):
            for l in range(table.shape[1]):
                out.append(DiagnosticSeries(f"{name}[{l}]", self.epochs, table[:, l],
                                            self.seed, self.config_hash))
        return out


def attention_trace(run) -> AttentionTrace:
    """Per-epoch alpha and raw-score vectors of a HistoGraph run."""
    records, config = _records(run)
    readout = config.get("model", {}).get("readout")
    if readout not in (None, "histograph") or not records or any("alpha" not in r for r in records):
        raise ContractError("attention traces exist only for runs with the HistoGraph readout")
    seed = config.get("train", {}).get("seed", 0)
    return AttentionTrace(
        np.array([r["epoch"] for r in records]),
        np.array([r["alpha"] for r in records], dtype=np.float64),
        np.array([r["scores"] for r in records], dtype=np.float64),
        config_hash(config) if config else "",
        seed,
    )


class EpochTiming(NamedTuple):
    seconds: float
    config_hash: str


def epoch_timer(run, warmup: int = 1) -> EpochTiming:
    """Median per-epoch wall time, discarding ``warmup`` leading epochs.

    At least five timed epochs must remain after warmup.
    """
    records, config = _records(run)
    times = [r["epoch_time"] for r in records][warmup:]
    if len(times) < 5:
        raise ContractError(f"need at least {warmup + 5} epochs to time a run, got {len(records)}")
    return EpochTiming(float(np.median(times)), config_hash(config) if config else "")


def time_pooling(num_nodes: int, num_layers: int, width: int, repeats: int = 5, seed: int = 0,
                 config: PoolConfig | None = None) -> float:
    """Best-of-``repeats`` wall time of one HistoGraph forward over a random single-graph history.

    Input generation and parameter initialization are excluded from the measurement.
    """
    config = config or PoolConfig(hidden=width)
    rng = np.random.default_rng(seed)
    dtype = nc.get_default_dtype()
    params = init_pool_params(width, config, rng, dtype)
    hist = ActivationHistory.from_array(rng.standard_normal((num_nodes, num_layers, width)).astype(dtype))
    best = float("inf")
    with nc.no_grad():
        for _ in range(repeats):
            start = time.perf_counter()
            histograph_forward(hist, params, config)
            best = min(best, time.perf_counter() - start)
    return best


def linear_fit_r2(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Slope and coefficient of determination of an ordinary least-squares line."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    total = np.sum((y - y.mean()) ** 2)
    return float(slope), float(1.0 - np.sum(resid ** 2) / total) if total > 0 else 1.0
