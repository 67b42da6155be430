"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive computes its forward value with numpy and records a closure
mapping the output gradient to gradients for each input. ``backward`` walks
the recorded graph once in reverse topological order.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> backward((x * x).sum())
    >>> x.grad
    array([2., 4., 6.])
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import builtins

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "no_grad",
    "matmul",
    "affine",
    "conv1d_time",
    "spatial_conv",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "sqrt",
    "clamp_min",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "max",
    "min",
    "concat",
    "reshape",
    "transpose",
]


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or infinite values."""

    def __init__(self, op: str, shape: tuple[int, ...]):
        super().__init__(f"{op}: produced non-finite values (output shape {shape})")
        self.op = op


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Evaluate primitives without recording the graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An immutable float64 array that remembers how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        arr = np.array(data, dtype=dtype)
        if not np.isfinite(arr).all():
            raise NonFiniteError("leaf", arr.shape)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def _result(cls, data: np.ndarray, op: str, parents: tuple[Tensor, ...],
                backward_fn: BackwardFn) -> Tensor:
        if not np.isfinite(data).all():
            raise NonFiniteError(op, np.shape(data))
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        data.flags.writeable = False
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operators
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

    def __getitem__(self, index):
        return _slice(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max(self, axis, keepdims)

    def min(self, axis=None, keepdims=False):
        return min(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# graph traversal

@dataclass
class Graph:
    """Recorded computation reachable from a root tensor.

    ``nodes`` is topologically ordered (inputs before outputs) and contains
    each tensor once. ``leaves`` are the nodes that require grad and were not
    produced by a primitive, i.e. trainable parameters and inputs.
    """

    nodes: list[Tensor] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> Graph:
        order: list[Tensor] = []
        visited: set[int] = set()
        # iterative DFS; recursion would overflow on long recurrent graphs
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        leaves = [n for n in order if n.requires_grad and n.is_leaf]
        return cls(nodes=order, leaves=leaves)


def backward(loss: Tensor) -> list[Tensor]:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Existing leaf gradients are overwritten, not accumulated. Returns the
    leaves in topological order.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: set[int] = set()
    for node in reversed(graph.nodes):
        assert id(node) not in seen, "graph node visited twice"
        seen.add(id(node))
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if node.requires_grad:
                node.grad = np.zeros_like(node.data) if g is None else g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"{node.op}: backward produced gradient of shape {pg.shape} "
                    f"for input of shape {parent.shape}")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return graph.leaves


# elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("add", a, b)
    return Tensor._result(a.data + b.data, "add", (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("sub", a, b)
    return Tensor._result(a.data - b.data, "sub", (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("mul", a, b)
    return Tensor._result(a.data * b.data, "mul", (a, b), lambda g: (
        _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
        _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return Tensor._result(out, "div", (a, b), lambda g: (
        _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
        _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._result(-a.data, "neg", (a,), lambda g: (-g,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return Tensor._result(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log", a.shape)
    return Tensor._result(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data < 0).any():
        raise NonFiniteError("sqrt", a.shape)
    out = np.sqrt(a.data)
    return Tensor._result(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def clamp_min(a, floor: float) -> Tensor:
    """``max(a, floor)`` elementwise; gradient is zero where clamped."""
    a = _as_tensor(a)
    keep = a.data >= floor
    return Tensor._result(np.where(keep, a.data, floor), "clamp_min", (a,),
                          lambda g: (g * keep,))


# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return Tensor._result(out, "sum", (a,), lambda g: (
        np.array(_expand(g, a.shape, axis, keepdims)),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    if a.size == 0:
        raise ShapeError(f"mean: empty input of shape {a.shape}")
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size // builtins.max(out.size, 1)
    return Tensor._result(out, "mean", (a,), lambda g: (
        np.array(_expand(g, a.shape, axis, keepdims)) / count,))


def max(a, axis=None, keepdims=False) -> Tensor:
    """Maximum along ``axis``; ties send the whole gradient to the first maximum."""
    a = _as_tensor(a)
    if a.size == 0:
        raise ShapeError(f"max: empty input of shape {a.shape}")
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx] if not keepdims else flat[idx].reshape((1,) * a.ndim)

        def _back(g):
            grad = np.zeros(a.size)
            grad[idx] = np.sum(g)
            return (grad.reshape(a.shape),)
        return Tensor._result(np.array(out), "max", (a,), _back)
    if not isinstance(axis, int):
        raise ShapeError("max: reduction over a single axis only")
    axis = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def _back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, g, axis=axis)
        return (grad,)
    return Tensor._result(out if keepdims else np.squeeze(out, axis), "max", (a,), _back)


def min(a, axis=None, keepdims=False) -> Tensor:
    return neg(max(neg(a), axis, keepdims))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return Tensor._result(out, "softmax", (a,), _back)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def _back(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)
    return Tensor._result(out, "log_softmax", (a,), _back)


# linear algebra

def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., n, k) and a 2-D ``b`` of shape (k, m)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def _back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb
    return Tensor._result(out, "matmul", (a, b), _back)


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` with weight (in, out) and bias (out,)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if weight.ndim != 2 or bias.shape != (weight.shape[1],) or x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"affine: incompatible shapes x={x.shape}, weight={weight.shape}, bias={bias.shape}")
    out = x.data @ weight.data + bias.data

    def _back(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]) \
            if weight.requires_grad else None
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb
    return Tensor._result(out, "affine", (x, weight, bias), _back)


def conv1d_time(x, weight, bias) -> Tensor:
    """Convolution along the time axis with length-preserving zero padding.

    ``x`` is (B, T, C_in), ``weight`` is (kernel, C_in, C_out), ``bias`` is
    (C_out,). The kernel must be odd; output is (B, T, C_out) and step ``t``
    sees inputs ``t - kernel//2 .. t + kernel//2``.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if (x.ndim != 3 or weight.ndim != 3 or weight.shape[1] != x.shape[2]
            or bias.shape != (weight.shape[2],)):
        raise ShapeError(
            f"conv1d_time: incompatible shapes x={x.shape}, weight={weight.shape}, "
            f"bias={bias.shape}")
    k = weight.shape[0]
    if k % 2 != 1:
        raise ShapeError(f"conv1d_time: kernel size must be odd, got {k}")
    pad = k // 2
    T = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    out = np.broadcast_to(bias.data, (x.shape[0], T, weight.shape[2])).copy()
    for j in range(k):
        out += xp[:, j:j + T, :] @ weight.data[j]

    def _back(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + T, :] += g @ weight.data[j].T
            gx = gxp[:, pad:pad + T, :]
        if weight.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            gw = np.stack([xp[:, j:j + T, :].reshape(-1, x.shape[2]).T @ g2 for j in range(k)])
        if bias.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb
    return Tensor._result(out, "conv1d_time", (x, weight, bias), _back)


def spatial_conv(x, weight, bias) -> Tensor:
    """Convolution whose kernel covers the whole w x h extent (no sliding).

    ``x`` is (..., w, h, C), ``weight`` is (w, h, C, d), ``bias`` is (d,);
    the result is (..., d), one vector per feature map.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if (x.ndim < 3 or weight.ndim != 4 or x.shape[-3:] != weight.shape[:3]
            or bias.shape != (weight.shape[3],)):
        raise ShapeError(
            f"spatial_conv: incompatible shapes x={x.shape}, weight={weight.shape}, "
            f"bias={bias.shape}")
    lead = x.shape[:-3]
    fan_in = int(np.prod(weight.shape[:3]))
    x2 = x.data.reshape(-1, fan_in)
    w2 = weight.data.reshape(fan_in, -1)
    out = (x2 @ w2 + bias.data).reshape(*lead, weight.shape[3])

    def _back(g):
        g2 = g.reshape(-1, weight.shape[3])
        gx = (g2 @ w2.T).reshape(x.shape) if x.requires_grad else None
        gw = (x2.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb
    return Tensor._result(out, "spatial_conv", (x, weight, bias), _back)


# structural

def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i]
                                 for i in range(ndim) if i != axis):
            raise ShapeError(
                f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))
    return Tensor._result(out, "concat", tensors, _back)


def _slice(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    if isinstance(index, (list, np.ndarray)) or (
            isinstance(index, tuple) and any(isinstance(i, (list, np.ndarray)) for i in index)):
        raise ShapeError("slice: only basic indexing (ints, slices, None, ...) is supported")
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}") from exc

    def _back(g):
        grad = np.zeros_like(a.data)
        grad[index] += g
        return (grad,)
    return Tensor._result(np.array(out), "slice", (a,), _back)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return Tensor._result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return Tensor._result(np.transpose(a.data, axes), "transpose", (a,),
                          lambda g: (np.transpose(g, inverse),))
