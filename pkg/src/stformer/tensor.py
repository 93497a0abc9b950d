"""Dense double-precision tensors with tape-based reverse-mode differentiation.

Only ops executed while a :class:`GradTape` is active, and that touch at least
one tensor requiring gradients, are recorded. Everything else runs as plain
numpy, which keeps inference and benchmarking free of bookkeeping.

Example::

    w = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    with GradTape():
        loss = (w * w).sum()
    grads = backward(loss)      # {w: [[2, 4], [6, 8]]}
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "NumericError",
    "TapeError",
    "Tensor",
    "GradTape",
    "backward",
    "as_tensor",
    "matmul",
    "softmax_rows",
    "layer_norm",
    "concat",
    "embedding",
    "relu",
    "gelu",
    "stop_gradient",
    "trace_ops",
]

LAYER_NORM_EPS = 1e-5


class DimensionError(ValueError):
    """Operand extents are incompatible."""


class NumericError(ArithmeticError):
    """Non-finite values reached an op that requires finite input."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (detached loss, reused tape, ...)."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class OpRecord:
    name: str
    input_sizes: tuple[int, ...]
    output_shape: tuple[int, ...]


@contextlib.contextmanager
def trace_ops() -> Iterator[list[OpRecord]]:
    """Record the name, input sizes and output shape of every op executed.

    Test instrumentation only: used to assert that no ``n x n`` intermediate
    is ever created and that landmark scans stay linear in ``n``.
    """
    records: list[OpRecord] = []
    prev = getattr(_local, "trace", None)
    _local.trace = records
    try:
        yield records
    finally:
        _local.trace = prev


def _trace(name: str, inputs: Sequence[np.ndarray], out: np.ndarray) -> None:
    records = getattr(_local, "trace", None)
    if records is not None:
        records.append(OpRecord(name, tuple(int(a.size) for a in inputs), tuple(out.shape)))


class GradTape:
    """Ordered record of differentiable ops; single use per backward pass.

    Creation order is a valid topological order, so backward simply replays
    the records in reverse.
    """

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> GradTape:
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], vjp: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        out._tape = self
        self._records.append((out, parents, vjp))


class Tensor:
    """Value-semantic wrapper around a float64 ndarray.

    ``requires_grad=True`` on a tensor built directly by the user marks it as a
    trainable leaf. Tensors produced by recorded ops carry a reference to the
    tape that produced them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    __array_ufunc__ = None  # make ndarray (op) Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: GradTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return _add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -as_tensor(other))

    def __rsub__(self, other):
        return _add(as_tensor(other), -self)

    def __neg__(self):
        return _scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _scale(self, float(other))
        return _mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return _scale(self, 1.0 / float(other))
        return _div(self, as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        return _getitem(self, index)

    # shape ops --------------------------------------------------------------
    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return _transpose(self, axes)

    def swapaxes(self, a: int, b: int) -> Tensor:
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return _transpose(self, tuple(axes))

    @property
    def T(self) -> Tensor:
        return self.swapaxes(-1, -2)

    def broadcast_to(self, shape) -> Tensor:
        return _broadcast_to(self, tuple(shape))

    # reductions -------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in _axes(axis)]))
        return _scale(_sum(self, axis, keepdims), 1.0 / count)

    def max(self, axis: int = -1, keepdims: bool = False) -> Tensor:
        return _max(self, axis, keepdims)

    def abs(self) -> Tensor:
        return _abs(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def stop_gradient(x: Tensor) -> Tensor:
    """A constant copy of ``x``; contributes no gradient."""
    return Tensor(x.data)


def _axes(axis) -> tuple[int, ...]:
    return (axis,) if isinstance(axis, int) else tuple(axis)


def _emit(name: str, data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    _trace(name, [p.data for p in parents], data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._record(out, parents, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


# elementwise -------------------------------------------------------------------
def _add(a: Tensor, b: Tensor) -> Tensor:
    return _emit(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def _scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def _div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _emit(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def _abs(a: Tensor) -> Tensor:
    return _emit("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * d_inner),)

    return _emit("gelu", out, (x,), vjp)


# linear algebra ------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes into one GEMM (much faster than stacked matmul)
        k = a.shape[-1]
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + b.shape[-1:])

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, k).T @ g2
            return ga, gb

    else:
        try:
            out = np.matmul(a.data, b.data)
        except ValueError as exc:
            raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

        def vjp(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", out, (a, b), vjp)


def _softmax_vjp(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return y * (g - np.sum(g * y, axis=-1, keepdims=True))


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    m = as_tensor(m)
    if not np.all(np.isfinite(m.data)):
        raise NumericError("softmax_rows received non-finite input")
    z = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    # resolved at call time so tests can substitute a faulty rule
    return _emit("softmax", y, (m,), lambda g: (_softmax_vjp(y, g),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm width {d} does not match gain {gain.shape} / bias {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gh = g * gain.data
        gx = inv * (
            gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _emit("layer_norm", out, (x, gain, bias), vjp)


# reductions --------------------------------------------------------------------
def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, tuple(ax % a.ndim for ax in _axes(axis)))
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(out, dtype=np.float64), (a,), vjp)


def _max(a: Tensor, axis: int, keepdims: bool) -> Tensor:
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        grad = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(grad, np.expand_dims(idx, axis), gk, axis=axis)
        return (grad,)

    return _emit("max", out, (a,), vjp)


# shape ---------------------------------------------------------------------
def _reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from exc
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def _transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return _emit("broadcast", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def vjp(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _emit("slice", np.array(out, dtype=np.float64), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(tensors), vjp)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup ``table[indices]``; indices are 0-based integers."""
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    out = table.data[indices]

    def vjp(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, indices.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (grad,)

    return _emit("embedding", out, (table,), vjp)


# backward ----------------------------------------------------------------
def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Replay the tape that produced ``loss`` and return leaf gradients.

    Every trainable leaf reachable from ``loss`` gets an entry (also stored on
    its ``.grad``). The tape is consumed.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is detached from any gradient tape")
    if tape.consumed:
        raise TapeError("tape already consumed by a backward pass")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, parents, vjp in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, vjp(g)):
            if not parent.requires_grad:
                continue
            if parent.is_leaf:
                leaves[id(parent)] = parent
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    tape.consumed = True
    tape._records = []

    result: dict[Tensor, np.ndarray] = {}
    for pid, leaf in leaves.items():
        leaf.grad = grads[pid]
        result[leaf] = grads[pid]
    return result
