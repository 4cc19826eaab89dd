"""Binary formats: activation cache (``HGAC``) and checkpoints (``HGCK``).

All integers are little-endian u32 and all tensor payloads little-endian float32.

Activation cache::

    "HGAC" | version=1 | graph count
    per graph: N | L | D | payload length | payload (UTF-8 JSON labels) | N*L*D floats

Checkpoint::

    "HGCK" | version=1 | meta length | meta (UTF-8 JSON) | tensor count
    per tensor: name length | name | rank | dims[rank] | float32 values
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError

CACHE_MAGIC = b"HGAC"
CHECKPOINT_MAGIC = b"HGCK"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


def _check_header(reader: _Reader, magic: bytes) -> None:
    got = reader.take(4)
    if got != magic:
        raise FormatError(f"{reader.what}: bad magic {got!r}, expected {magic!r}")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{reader.what}: unsupported format version {version}")


@dataclass
class CachedGraph:
    history: np.ndarray
    label: int | None = None
    node_labels: np.ndarray | None = None
    node_targets: np.ndarray | None = None

    def payload(self) -> dict:
        out = {}
        if self.label is not None:
            out["label"] = int(self.label)
        if self.node_labels is not None:
            out["node_labels"] = np.asarray(self.node_labels).tolist()
        if self.node_targets is not None:
            out["node_targets"] = np.asarray(self.node_targets).tolist()
        return out


@dataclass
class ActivationCache:
    graphs: list[CachedGraph] = field(default_factory=list)
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def shape(self) -> tuple[int, int]:
        """``(L, D)`` shared by every cached history."""
        if not self.graphs:
            return (0, 0)
        return self.graphs[0].history.shape[1:]

    def to_bytes(self) -> bytes:
        parts = [CACHE_MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(self.graphs))]
        for g in self.graphs:
            hist = np.ascontiguousarray(g.history, dtype="<f4")
            if hist.ndim != 3:
                raise FormatError(f"cached history must be N x L x D, got shape {hist.shape}")
            payload = _dumps(g.payload())
            parts += [struct.pack("<4I", *hist.shape, len(payload)), payload, hist.tobytes()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ActivationCache":
        r = _Reader(data, "activation cache")
        _check_header(r, CACHE_MAGIC)
        graphs = []
        for _ in range(r.u32()):
            n, num_layers, width, plen = (r.u32() for _ in range(4))
            try:
                payload = json.loads(r.take(plen).decode("utf-8")) if plen else {}
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"activation cache: unreadable label payload ({exc})") from exc
            hist = r.floats(n * num_layers * width).reshape(n, num_layers, width)
            graphs.append(CachedGraph(
                hist,
                payload.get("label"),
                None if "node_labels" not in payload else np.asarray(payload["node_labels"], np.int64),
                None if "node_targets" not in payload else np.asarray(payload["node_targets"], np.float64),
            ))
        r.done()
        return cls(graphs)

    def save(self, path) -> None:
        _atomic_write(path, self.to_bytes())
        self.path = Path(path)

    @classmethod
    def load(cls, path) -> "ActivationCache":
        cache = cls.from_bytes(Path(path).read_bytes())
        cache.path = Path(path)
        return cache


@dataclass
class Checkpoint:
    """Named float32 tensors plus a JSON metadata block (config, epoch, metric history)."""

    params: dict[str, np.ndarray]
    config: dict
    epoch: int = 0
    history: list = field(default_factory=list)

    def to_bytes(self) -> bytes:
        meta = _dumps({"config": self.config, "epoch": self.epoch, "history": self.history})
        parts = [CHECKPOINT_MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(meta)), meta,
                 _U32.pack(len(self.params))]
        for name, arr in self.params.items():
            # asarray, not ascontiguousarray: the latter promotes 0-d tensors (GIN eps) to 1-d
            arr = np.asarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            parts += [_U32.pack(len(encoded)), encoded, _U32.pack(arr.ndim),
                      struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        r = _Reader(data, "checkpoint")
        _check_header(r, CHECKPOINT_MAGIC)
        try:
            meta = json.loads(r.take(r.u32()).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"checkpoint: unreadable metadata ({exc})") from exc
        params = {}
        for _ in range(r.u32()):
            name = r.take(r.u32()).decode("utf-8")
            rank = r.u32()
            dims = tuple(r.u32() for _ in range(rank))
            params[name] = r.floats(int(np.prod(dims, dtype=np.int64))).reshape(dims)
        r.done()
        return cls(params, meta["config"], meta["epoch"], meta["history"])

    def save(self, path) -> None:
        _atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
