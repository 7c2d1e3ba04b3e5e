"""Dense float64 tensors with reverse-mode differentiation.

Only the primitives the PHN layers need are provided. Every op records its
inputs and a closure that pushes the output gradient back to them; calling
:func:`backward` on a scalar walks the recorded nodes in exact reverse
construction order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import BatchSizeError, ConfigError, ContractError, DimensionError

_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _op="leaf"):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(_parents)
        self._backward = None
        self._op = _op
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, op, backward):
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    if needs:
        out._backward = backward
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(out):
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(out.grad, b.shape))

    return _result(data, (a, b), "add", backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def backward(out):
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(-out.grad, b.shape))

    return _result(data, (a, b), "sub", backward)


def mul(a, b):
    """Elementwise product with numpy broadcasting (used for gates and scales)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(out):
        _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
        _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

    return _result(data, (a, b), "mul", backward)


def hadamard(a, b):
    """Strict elementwise product: both operands must have identical shapes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard needs identical shapes, got {a.shape} and {b.shape}")
    return mul(a, b)


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(out):
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(data, (a, b), "matmul", backward)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def _stable_sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(z):
    z = as_tensor(z)
    s = _stable_sigmoid(z.data)

    def backward(out):
        _accumulate(z, out.grad * s * (1.0 - s))

    return _result(s, (z,), "sigmoid", backward)


def leaky_relu(x, slope=0.01):
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    positive = x.data > 0
    data = np.where(positive, x.data, slope * x.data)

    def backward(out):
        # derivative at exactly 0 is taken as the slope
        _accumulate(x, out.grad * np.where(positive, 1.0, slope))

    return _result(data, (x,), "leaky_relu", backward)


def softmax_rows(a):
    """Softmax over the last axis with per-row max subtraction."""
    a = as_tensor(a)
    if a.data.ndim == 0 or a.shape[-1] < 1:
        raise DimensionError(f"softmax_rows needs a non-empty last axis, got {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(out):
        g = out.grad
        _accumulate(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _result(s, (a,), "softmax", backward)


def log(x):
    x = as_tensor(x)
    data = np.log(x.data)

    def backward(out):
        _accumulate(x, out.grad / x.data)

    return _result(data, (x,), "log", backward)


def clip(x, lo, hi):
    x = as_tensor(x)
    data = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(out):
        _accumulate(x, out.grad * inside)

    return _result(data, (x,), "clip", backward)


# ---------------------------------------------------------------------------
# Shape manipulation and reductions
# ---------------------------------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc

    def backward(out):
        _accumulate(x, out.grad.reshape(x.shape))

    return _result(data, (x,), "reshape", backward)


def permute(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.transpose(x.data, axes)

    def backward(out):
        _accumulate(x, np.transpose(out.grad, inverse))

    return _result(data, (x,), "permute", backward)


def transpose(x):
    """Swap the last two axes."""
    axes = list(range(as_tensor(x).data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat(tensors: Sequence[Tensor], axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(out):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * out.grad.ndim
                index[axis] = slice(lo, hi)
                _accumulate(t, out.grad[tuple(index)])

    return _result(data, tensors, "concat", backward)


def take_rows(table, indices):
    """Gather rows of a 2-D table; the gradient scatter-adds into looked-up rows."""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError(f"take_rows needs a 2-D table, got {table.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ContractError(
            f"row index out of range [0, {table.shape[0]}): "
            f"min={indices.min()} max={indices.max()}"
        )
    data = table.data[indices]

    def backward(out):
        g = np.zeros_like(table.data)
        np.add.at(g, indices.reshape(-1), out.grad.reshape(-1, table.shape[1]))
        _accumulate(table, g)

    return _result(data, (table,), "take_rows", backward)


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    data = x.data.sum(axis=axis)

    def backward(out):
        g = out.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(data, (x,), "sum", backward)


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm instance."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, width, momentum=0.1, eps=1e-5):
        return cls(np.zeros(width), np.ones(width), momentum, eps)


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool):
    """Per-column standardization of a (batch, width) tensor followed by an affine map.

    In training mode the batch mean and population variance are used and the
    running statistics are updated in place; in eval mode the running
    statistics are used and nothing is mutated.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2:
        raise DimensionError(f"batch_norm expects (batch, width), got {x.shape}")
    n, width = x.shape
    if gamma.shape != (width,) or beta.shape != (width,):
        raise DimensionError(f"affine shapes {gamma.shape}/{beta.shape} do not match width {width}")

    if training:
        if n < 2:
            raise BatchSizeError(f"batch_norm in train mode needs batch >= 2, got {n}")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * var
    else:
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    data = gamma.data * xhat + beta.data

    def backward(out):
        g = out.grad
        _accumulate(gamma, (g * xhat).sum(axis=0))
        _accumulate(beta, g.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            if training:
                dx = inv / n * (
                    n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
                )
            else:
                dx = dxhat * inv
            _accumulate(x, dx)

    return _result(data, (x, gamma, beta), "batch_norm", backward)


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeRecord:
    op: str
    node_id: int
    input_ids: tuple
    output: Tensor = field(repr=False)


class Graph:
    """The ordered set of op records reachable from an output tensor."""

    def __init__(self, nodes: list[NodeRecord]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen = {}
        stack = [out]
        while stack:
            t = stack.pop()
            if t._id in seen:
                continue
            seen[t._id] = t
            stack.extend(t._parents)
        ordered = sorted(seen.values(), key=lambda t: t._id)
        return cls([NodeRecord(t._op, t._id, tuple(p._id for p in t._parents), t) for t in ordered])

    def __len__(self):
        return len(self.nodes)

    def reverse(self) -> Iterable[NodeRecord]:
        return reversed(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None):
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable leaf.

    Gradients of leaves add onto whatever is already stored, so callers zero
    them between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or Graph.from_output(loss)
    for record in graph.nodes:
        if record.output._backward is not None:
            record.output.grad = None
    loss.grad = np.ones_like(loss.data)
    for record in graph.reverse():
        t = record.output
        if t._backward is not None and t.grad is not None:
            t._backward(t)

