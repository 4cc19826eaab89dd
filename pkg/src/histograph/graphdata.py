"""Graph containers, batching, synthetic generators and file loaders."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, IngestionError, ParameterError, ShapeError


def _canonical_edges(edges, num_nodes: int) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2) if len(edges) else np.zeros((0, 2), np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
        raise ContractError(f"edge endpoint out of range [0, {num_nodes})")
    if np.any(arr[:, 0] == arr[:, 1]):
        raise ContractError("self-loops are not stored; normalized_adjacency adds them")
    arr = np.sort(arr, axis=1)
    if len(np.unique(arr, axis=0)) != len(arr):
        raise ContractError("duplicate undirected edge")
    return arr


@dataclass(eq=False)
class Graph:
    """One undirected graph. Each edge is stored once as ``(min, max)``."""

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    label: int | None = None
    node_labels: np.ndarray | None = None
    node_targets: np.ndarray | None = None

    def __post_init__(self):
        self.num_nodes = int(self.num_nodes)
        if self.num_nodes < 1:
            raise ContractError("a graph needs at least one node")
        self.edges = _canonical_edges(self.edges, self.num_nodes)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.num_nodes:
            raise ShapeError(f"features must be {self.num_nodes}xD, got {self.features.shape}")
        if self.label is not None:
            self.label = int(self.label)
        if self.node_labels is not None:
            self.node_labels = np.asarray(self.node_labels, dtype=np.int64).reshape(self.num_nodes)
        if self.node_targets is not None:
            self.node_targets = np.asarray(self.node_targets, dtype=np.float64).reshape(self.num_nodes, -1)

    @property
    def in_dim(self) -> int:
        return self.features.shape[1]

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.reshape(-1), minlength=self.num_nodes)

    def permuted(self, perm: Sequence[int]) -> "Graph":
        """Relabel nodes so new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        return Graph(
            self.num_nodes,
            inverse[self.edges] if len(self.edges) else self.edges,
            self.features[perm],
            self.label,
            None if self.node_labels is None else self.node_labels[perm],
            None if self.node_targets is None else self.node_targets[perm],
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.features, other.features)
            and self.label == other.label
            and _opt_equal(self.node_labels, other.node_labels)
            and _opt_equal(self.node_targets, other.node_targets)
        )


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass(frozen=True)
class NormalizedAdjacency:
    """``D^-1/2 (A + I) D^-1/2`` as coordinate triples, both edge directions present."""

    num_nodes: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray

    def to_csr(self, dtype=np.float64) -> sp.csr_matrix:
        return sp.csr_matrix((self.weights.astype(dtype), (self.rows, self.cols)),
                             shape=(self.num_nodes, self.num_nodes))

    def to_dense(self) -> np.ndarray:
        return self.to_csr().toarray()


def normalized_adjacency(g) -> NormalizedAdjacency:
    """Symmetric GCN propagation operator with self-loops; ``g`` is a Graph or GraphBatch."""
    n = g.num_nodes
    e = np.asarray(g.edges, dtype=np.int64).reshape(-1, 2)
    loops = np.arange(n)
    rows = np.concatenate([e[:, 0], e[:, 1], loops])
    cols = np.concatenate([e[:, 1], e[:, 0], loops])
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    weights = 1.0 / np.sqrt(deg[rows] * deg[cols])
    return NormalizedAdjacency(n, rows, cols, weights)


def sum_adjacency(g) -> sp.csr_matrix:
    """Binary adjacency (both directions, no self-loops) used for sum aggregation."""
    n = g.num_nodes
    e = np.asarray(g.edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


@dataclass(eq=False)
class GraphBatch:
    """Several graphs stacked into one disconnected graph."""

    features: np.ndarray
    edges: np.ndarray
    node_graph_id: np.ndarray
    graph_offsets: np.ndarray
    labels: np.ndarray | None = None
    node_labels: np.ndarray | None = None
    node_targets: np.ndarray | None = None
    _dtype_cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_nodes(self) -> int:
        return int(self.graph_offsets[-1])

    @property
    def num_graphs(self) -> int:
        return len(self.graph_offsets) - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.graph_offsets)

    @cached_property
    def gcn_adjacency(self) -> sp.csr_matrix:
        return normalized_adjacency(self).to_csr()

    @cached_property
    def neighbor_sum(self) -> sp.csr_matrix:
        return sum_adjacency(self)

    @cached_property
    def mean_pool_matrix(self) -> sp.csr_matrix:
        return segment_mean_matrix(self.node_graph_id, self.num_graphs)

    def sparse(self, name: str, dtype) -> sp.csr_matrix:
        """Cached dtype-specific copy of one of the sparse operators."""
        key = (name, np.dtype(dtype).str)
        if key not in self._dtype_cache:
            self._dtype_cache[key] = getattr(self, name).astype(dtype)
        return self._dtype_cache[key]


def segment_mean_matrix(node_graph_id: np.ndarray, num_graphs: int) -> sp.csr_matrix:
    ids = np.asarray(node_graph_id)
    counts = np.bincount(ids, minlength=num_graphs)
    if np.any(counts == 0):
        raise ContractError("every graph must have at least one node")
    n = len(ids)
    return sp.csr_matrix((1.0 / counts[ids], (ids, np.arange(n))), shape=(num_graphs, n))


def segment_sum_matrix(node_graph_id: np.ndarray, num_graphs: int) -> sp.csr_matrix:
    ids = np.asarray(node_graph_id)
    n = len(ids)
    return sp.csr_matrix((np.ones(n), (ids, np.arange(n))), shape=(num_graphs, n))


def batch_graphs(graphs: Sequence[Graph]) -> GraphBatch:
    if not graphs:
        raise ContractError("cannot batch an empty graph list")
    widths = {g.in_dim for g in graphs}
    if len(widths) != 1:
        raise ShapeError(f"mixed feature widths in batch: {sorted(widths)}")
    sizes = np.array([g.num_nodes for g in graphs])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    edges = np.concatenate([g.edges + off for g, off in zip(graphs, offsets[:-1])])
    ids = np.repeat(np.arange(len(graphs)), sizes)

    def gather(attr):
        vals = [getattr(g, attr) for g in graphs]
        if any(v is None for v in vals):
            return None
        return np.concatenate(vals)

    labels = None
    if all(g.label is not None for g in graphs):
        labels = np.array([g.label for g in graphs], dtype=np.int64)
    return GraphBatch(
        features=np.concatenate([g.features for g in graphs]),
        edges=edges.reshape(-1, 2),
        node_graph_id=ids,
        graph_offsets=offsets,
        labels=labels,
        node_labels=gather("node_labels"),
        node_targets=gather("node_targets"),
    )


def unbatch(batch: GraphBatch) -> list[Graph]:
    graphs = []
    edge_owner = batch.node_graph_id[batch.edges[:, 0]] if len(batch.edges) else np.zeros(0, np.int64)
    for i, (lo, hi) in enumerate(zip(batch.graph_offsets[:-1], batch.graph_offsets[1:])):
        graphs.append(Graph(
            num_nodes=hi - lo,
            edges=batch.edges[edge_owner == i] - lo,
            features=batch.features[lo:hi],
            label=None if batch.labels is None else int(batch.labels[i]),
            node_labels=None if batch.node_labels is None else batch.node_labels[lo:hi],
            node_targets=None if batch.node_targets is None else batch.node_targets[lo:hi],
        ))
    return graphs


# synthetic generators

SYNTHETIC_KINDS = ("barbell_gradient", "bridge_singleton", "community_classes")
_KIND_ALIASES = {"barbell": "barbell_gradient", "bridge": "bridge_singleton",
                 "community": "community_classes"}


def feature_gradient(num_nodes: int, edges: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Neighbor-averaged discrete gradient ``(1/deg v) * sum_{u~v} (x_u - x_v)``."""
    x = np.asarray(x, dtype=np.float64).reshape(num_nodes, -1)
    adj = sum_adjacency(_EdgeView(num_nodes, edges))
    deg = np.asarray(adj.sum(axis=1)).reshape(-1, 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (adj @ x) / deg - x
    return np.where(deg > 0, out, 0.0)


@dataclass
class _EdgeView:
    num_nodes: int
    edges: np.ndarray


def barbell_edges(n: int) -> np.ndarray:
    """Two ``n``-cliques on nodes ``[0, n)`` and ``[n, 2n)`` joined by edge ``(n-1, n)``."""
    clique = [(i, j) for i in range(n) for j in range(i + 1, n)]
    left = np.array(clique)
    return np.concatenate([left, left + n, [[n - 1, n]]])


def _barbell_gradient(rng, n: int = 8, num_graphs: int = 1) -> list[Graph]:
    if n < 3:
        raise ParameterError(f"barbell clique size must be >= 3, got n={n}")
    edges = barbell_edges(n)
    graphs = []
    for _ in range(num_graphs):
        x = rng.integers(-1, 2, size=(2 * n, 1)).astype(np.float64)
        graphs.append(Graph(2 * n, edges, x, node_targets=feature_gradient(2 * n, edges, x)))
    return graphs


def _erdos_renyi(rng, n: int, p: float) -> np.ndarray:
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    return np.stack([iu[keep], ju[keep]], axis=1)


def _bridge_singleton(rng, n: int = 10, p: float = 0.3, num_graphs: int = 2,
                      noise: float = 0.5) -> list[Graph]:
    if n < 3:
        raise ParameterError(f"bridge_singleton subgraph size must be >= 3, got n={n}")
    if not 0.0 < p < 1.0:
        raise ParameterError(f"edge probability p must lie in (0, 1), got p={p}")
    labels = np.arange(num_graphs) % 2
    rng.shuffle(labels)
    graphs = []
    for label in labels:
        body = _erdos_renyi(rng, n, p)
        anchor = int(rng.integers(n))
        edges = np.concatenate([body.reshape(-1, 2), [[anchor, n]]])
        feats = np.zeros((n + 1, 2))
        feats[:, 0] = 1.0
        feats[:n, 1] = rng.normal(0.0, noise, size=n)
        feats[n, 1] = 1.0 if label else -1.0
        graphs.append(Graph(n + 1, edges, feats, label=int(label)))
    return graphs


def _community_classes(rng, num_graphs: int = 40, n: int = 12, p_in: float = 0.6,
                       p_out: float = 0.08, noise: float = 0.6) -> list[Graph]:
    """Class 0 graphs are assortative (dense inside communities), class 1 disassortative.

    Every node also carries its community index as a node label, with a noisy
    one-hot encoding of it as features.
    """
    if n < 2:
        raise ParameterError(f"community graphs need n >= 2, got n={n}")
    if num_graphs < 2:
        raise ParameterError("community_classes needs at least 2 graphs (one per class)")
    for name, val in (("p_in", p_in), ("p_out", p_out)):
        if not 0.0 < val < 1.0:
            raise ParameterError(f"{name} must lie in (0, 1), got {val}")
    labels = np.arange(num_graphs) % 2
    rng.shuffle(labels)
    graphs = []
    for label in labels:
        comm = np.arange(n) % 2
        rng.shuffle(comm)
        same = comm[:, None] == comm[None, :]
        dense, sparse_ = (p_in, p_out) if label == 0 else (p_out, p_in)
        prob = np.where(same, dense, sparse_)
        draw = rng.random((n, n)) < prob
        iu, ju = np.triu_indices(n, k=1)
        keep = draw[iu, ju]
        edges = np.stack([iu[keep], ju[keep]], axis=1)
        feats = np.eye(2)[comm] + rng.normal(0.0, noise, size=(n, 2))
        graphs.append(Graph(n, edges, feats, label=int(label), node_labels=comm))
    return graphs


_GENERATORS = {
    "barbell_gradient": _barbell_gradient,
    "bridge_singleton": _bridge_singleton,
    "community_classes": _community_classes,
}


def generate_synthetic(kind: str, params: dict | None = None, seed: int = 0) -> list[Graph]:
    """Build a seeded synthetic dataset.

    Kinds: ``barbell_gradient`` (params ``n``, ``num_graphs``), ``bridge_singleton``
    (``n``, ``p``, ``num_graphs``, ``noise``), ``community_classes`` (``num_graphs``,
    ``n``, ``p_in``, ``p_out``, ``noise``).
    """
    kind = _KIND_ALIASES.get(kind, kind)
    if kind not in _GENERATORS:
        raise ParameterError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    rng = np.random.default_rng(seed)
    try:
        return _GENERATORS[kind](rng, **(params or {}))
    except TypeError as exc:
        raise ParameterError(f"invalid parameters for {kind}: {exc}") from exc


# TU text format


def _tu_prefix(directory: Path) -> str:
    hits = sorted(directory.glob("*_A.txt"))
    if not hits:
        raise IngestionError(f"edge file (*_A.txt) absent in {directory}")
    return hits[0].name[: -len("_A.txt")]


def _read_int_table(path: Path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([int(float(tok)) for tok in line.replace(",", " ").split()])
            except ValueError as exc:
                raise IngestionError(f"{path.name}:{lineno}: not an integer row: {line!r}") from exc
    return np.array(rows, dtype=np.int64)


def load_tu_format(dir_path) -> list[Graph]:
    """Read ``DS_A.txt``, ``DS_graph_indicator.txt``, ``DS_graph_labels.txt`` and
    optionally ``DS_node_labels.txt`` (all 1-indexed) from ``dir_path``."""
    directory = Path(dir_path)
    if not directory.is_dir():
        raise IngestionError(f"dataset directory {directory} does not exist")
    prefix = _tu_prefix(directory)
    required = {
        "graph indicator": directory / f"{prefix}_graph_indicator.txt",
        "graph labels": directory / f"{prefix}_graph_labels.txt",
    }
    for what, path in required.items():
        if not path.exists():
            raise IngestionError(f"{what} file absent: {path.name}")

    edges = _read_int_table(directory / f"{prefix}_A.txt").reshape(-1, 2) - 1
    indicator = _read_int_table(required["graph indicator"]).reshape(-1) - 1
    graph_labels = _read_int_table(required["graph labels"]).reshape(-1)
    node_label_path = directory / f"{prefix}_node_labels.txt"
    node_labels = _read_int_table(node_label_path)[:, 0] if node_label_path.exists() else None

    num_graphs = len(graph_labels)
    if indicator.size and (indicator.min() < 0 or indicator.max() >= num_graphs):
        raise IngestionError("graph indicator references a graph id with no label")
    if np.any(np.diff(indicator) < 0):
        raise IngestionError("graph indicator must list nodes grouped by graph")
    num_nodes = len(indicator)
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        raise IngestionError("edge references a node outside the graph indicator")
    if node_labels is not None and len(node_labels) != num_nodes:
        raise IngestionError("node labels length differs from graph indicator length")

    label_values = np.unique(graph_labels)
    label_index = {v: i for i, v in enumerate(label_values)}
    if node_labels is not None:
        node_values = np.unique(node_labels)
        onehot = (node_labels[:, None] == node_values[None, :]).astype(np.float64)
    else:
        onehot = np.ones((num_nodes, 1))

    counts = np.bincount(indicator, minlength=num_graphs)
    if np.any(counts == 0):
        raise IngestionError("a graph id in the labels file has no nodes")
    offsets = np.concatenate([[0], np.cumsum(counts)])
    owner = indicator[edges[:, 0]] if edges.size else np.zeros(0, np.int64)
    if edges.size and np.any(owner != indicator[edges[:, 1]]):
        raise IngestionError("edge connects nodes of different graphs")

    graphs = []
    for gid in range(num_graphs):
        lo, hi = offsets[gid], offsets[gid + 1]
        local = edges[owner == gid] - lo
        local = local[local[:, 0] != local[:, 1]] if local.size else local.reshape(0, 2)
        local = np.unique(np.sort(local, axis=1), axis=0) if local.size else local
        graphs.append(Graph(
            hi - lo, local, onehot[lo:hi],
            label=label_index[graph_labels[gid]],
            node_labels=None if node_labels is None else node_labels[lo:hi],
        ))
    return graphs


# JSONL


def graph_to_record(g: Graph) -> dict:
    rec = {"num_nodes": g.num_nodes, "edges": g.edges.tolist(), "features": g.features.tolist()}
    if g.label is not None:
        rec["label"] = g.label
    if g.node_labels is not None:
        rec["node_labels"] = g.node_labels.tolist()
    if g.node_targets is not None:
        rec["node_targets"] = g.node_targets.tolist()
    return rec


def graph_from_record(rec: dict) -> Graph:
    for key in ("num_nodes", "edges", "features"):
        if key not in rec:
            raise IngestionError(f"missing field {key!r}")
    n = rec["num_nodes"]
    if not isinstance(n, int) or n < 1:
        raise IngestionError(f"num_nodes must be a positive integer, got {n!r}")
    feats = rec["features"]
    if not isinstance(feats, list) or len(feats) != n:
        raise IngestionError(f"features must have {n} rows")
    widths = {len(row) if isinstance(row, list) else -1 for row in feats}
    if len(widths) != 1 or -1 in widths:
        raise IngestionError("ragged feature rows")
    edges = rec["edges"]
    for e in edges:
        if not isinstance(e, list) or len(e) != 2:
            raise IngestionError(f"edge {e!r} is not a pair")
        if not all(isinstance(v, int) and 0 <= v < n for v in e):
            raise IngestionError(f"edge {e!r} out of range for {n} nodes")
    try:
        return Graph(n, edges, np.array(feats, dtype=np.float64), rec.get("label"),
                     rec.get("node_labels"), rec.get("node_targets"))
    except (ContractError, ShapeError, ValueError) as exc:
        raise IngestionError(str(exc)) from exc


def load_jsonl(path) -> list[Graph]:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"dataset file not found: {path}")
    graphs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise IngestionError("line is not a JSON object")
                graphs.append(graph_from_record(rec))
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path.name}:{lineno}: malformed JSON ({exc.msg})") from exc
            except IngestionError as exc:
                raise IngestionError(f"{path.name}:{lineno}: {exc}") from exc
    return graphs


def save_jsonl(graphs: Iterable[Graph], path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_record(g)) + "\n")
    os.replace(tmp, path)
