"""Dense tensors with reverse-mode differentiation.

Every differentiable operation records a :class:`TapeNode` on its output.
:func:`backward` walks the recorded nodes in reverse execution order and
accumulates gradients into leaf tensors. :func:`grad_check` compares those
gradients against central finite differences.

Two precisions are available: ``"single"`` (float32, the training default)
and ``"high"`` (float64, used for verification). The active precision is
thread-local, as is the gradient-recording switch.
"""

from __future__ import annotations

import hashlib
import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, EvaluationError, ShapeError

_PRECISIONS = {"single": np.float32, "high": np.float64}

_local = threading.local()
_seq = itertools.count()


def get_default_dtype() -> np.dtype:
    return np.dtype(getattr(_local, "dtype", np.float32))


def set_precision(name: str) -> None:
    if name not in _PRECISIONS:
        raise ContractError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _local.dtype = _PRECISIONS[name]


def dtype_for(name: str) -> np.dtype:
    if name not in _PRECISIONS:
        raise ContractError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    return np.dtype(_PRECISIONS[name])


@contextmanager
def precision(name: str):
    """Temporarily switch the default dtype (``"single"`` or ``"high"``)."""
    previous = get_default_dtype()
    set_precision(name)
    try:
        yield
    finally:
        _local.dtype = previous.type


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class TapeNode:
    __slots__ = ("op", "inputs", "backward_fn", "seq")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)


class Tensor:
    """A dense array plus an optional gradient buffer.

    ``data`` is not mutated by any operation; optimizers replace it wholesale.
    """

    __array_priority__ = 1000
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else _infer_dtype(data))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _raise_item(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype.kind == "f":
        return data.dtype
    return get_default_dtype()


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else get_default_dtype()))


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and, if needed, put it on the tape.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per input.
    """
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = TapeNode(op, tuple(inputs), backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return record("div", out, (a, b), backward)


def neg(a) -> Tensor:
    a = _lift(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    return record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,),
                  lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else from ``b``. ``cond`` is constant."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _pair(a, b)
    return record("where", np.where(cond, a.data, b.data), (a, b),
                  lambda g: (unbroadcast(np.where(cond, g, 0), a.shape),
                             unbroadcast(np.where(cond, 0, g), b.shape)))


# reductions and shape manipulation


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return record("transpose", out, (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return record("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,),
                  lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    out = a.data[idx]

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return record("getitem", np.array(out, copy=True), (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    return record("stack", out, tensors,
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return record("matmul", out, (a, b), backward)


def sparse_matmul(matrix: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times a dense 2-D tensor."""
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_matmul shape mismatch: {matrix.shape} @ {x.shape}")
    if matrix.dtype != x.dtype:
        matrix = matrix.astype(x.dtype)
    out = np.asarray(matrix @ x.data)
    return record("sparse_matmul", out, (x,), lambda g: (np.asarray(matrix.T @ g),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# normalizations


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax with max subtraction. ``mask`` (bool, broadcastable) marks allowed entries.

    Every slice along ``axis`` must keep at least one allowed entry.
    """
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return record("softmax", out.astype(x.dtype, copy=False), (x,), backward)


def rowwise_softmax(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"rowwise_softmax expects a 2-D tensor, got shape {x.shape}")
    return softmax(x, axis=1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return record("log_softmax", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgamma = unbroadcast(g * xhat, gamma.shape)
        dbeta = unbroadcast(g, beta.shape)
        return dx, dgamma, dbeta

    return record("layer_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# segment reductions over sorted group ids


def segment_max(x: Tensor, offsets: np.ndarray) -> Tensor:
    """Max over contiguous row blocks ``[offsets[i], offsets[i+1])``."""
    starts = np.asarray(offsets[:-1])
    if np.any(np.diff(offsets) <= 0):
        raise ContractError("segment_max requires every segment to be nonempty")
    out = np.maximum.reduceat(x.data, starts, axis=0)

    def backward(g):
        full = np.zeros_like(x.data)
        cols = np.arange(x.shape[1])
        for seg, (lo, hi) in enumerate(zip(offsets[:-1], offsets[1:])):
            rows = lo + np.argmax(x.data[lo:hi], axis=0)
            full[rows, cols] += g[seg]
        return (full,)

    return record("segment_max", out, (x,), backward)


# gradient driver


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf needing it.

    Gradients add onto existing buffers: calling twice without zeroing doubles them.
    """
    if loss.ndim != 0 and loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor that does not require grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._node is not None:
            order.append(t)
            stack_.extend(inp for inp in t._node.inputs if inp.requires_grad)
    order.sort(key=lambda t: t._node.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    if loss._node is None:
        _accumulate_leaf(loss, grads.pop(id(loss)))
        return
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        input_grads = t._node.backward_fn(g)
        for inp, ig in zip(t._node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            ig = np.asarray(ig, dtype=inp.dtype)
            if inp._node is None:
                _accumulate_leaf(inp, ig)
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + ig
            else:
                grads[id(inp)] = ig


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = g.reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    The relative error of one coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    Run under ``precision("high")``; single precision is too coarse for this.
    """
    if not 0.0 < step <= 1e-2:
        raise ContractError(f"grad_check step must lie in (0, 1e-2], got {step}")
    inputs = list(inputs)
    for t in inputs:
        t.data = np.array(t.data, copy=True)
        t.requires_grad = True
        t.grad = None

    out = fn(*inputs)
    _check_scalar_output(out)
    backward(out)
    analytic = [np.zeros(t.shape, dtype=t.dtype) if t.grad is None else t.grad for t in inputs]

    def evaluate() -> float:
        with no_grad():
            value = fn(*inputs)
        return _check_scalar_output(value)

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        flat_grad = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = evaluate()
            flat[i] = orig - step
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(flat_grad[i])
            denom = max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, abs(a - numeric) / denom)
    for t in inputs:
        t.grad = None
    return worst


def _check_scalar_output(out) -> float:
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("grad_check requires fn to return a scalar Tensor")
    value = float(out.data.reshape(-1)[0])
    if not np.isfinite(value):
        raise EvaluationError(f"grad_check: function returned non-finite value {value}")
    return value


class ParamStore(dict):
    """Named parameter tensors. Insertion order is the canonical order."""

    def add(self, name: str, value, dtype=None) -> Tensor:
        t = value if isinstance(value, Tensor) else parameter(value, name=name, dtype=dtype)
        t.requires_grad = True
        t.name = name
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def subset(self, prefix: str) -> "ParamStore":
        return ParamStore((k, v) for k, v in self.items() if k.startswith(prefix))

    def freeze(self, prefix: str = "") -> None:
        for k, v in self.items():
            if k.startswith(prefix):
                v.requires_grad = False

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for k in sorted(self):
            if not k.startswith(prefix):
                continue
            h.update(k.encode())
            h.update(np.ascontiguousarray(self[k].data).tobytes())
        return h.hexdigest()

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype=None) -> "ParamStore":
        store = cls()
        for k, v in arrays.items():
            store.add(k, np.array(v, dtype=dtype if dtype is not None else v.dtype))
        return store


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return w.astype(dtype if dtype is not None else get_default_dtype())


def all_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
