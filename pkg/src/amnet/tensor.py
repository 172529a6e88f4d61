"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps an ndarray together with an accumulated gradient and a
closure that routes incoming gradients to its parents.  Calling
``backward()`` on a scalar walks the graph once in reverse topological
order.  The graph is freed afterwards unless ``retain_graph=True``.

Tensors are treated as immutable values: operations return new tensors and
never write to their inputs.  A graph and its backward pass belong to a
single thread; independent graphs may live on separate threads.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphFreedError, ShapeMismatchError

DEFAULT_DTYPE = np.float64


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """Dense n-dimensional real array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    # Make numpy defer to the reflected operators below instead of trying
    # to absorb Tensor operands into object arrays.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""

    # ------------------------------------------------------------------ #
    # basic introspection
    # ------------------------------------------------------------------ #

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """The underlying array. Callers must not mutate it."""
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        head = np.array2string(self.data, precision=5, threshold=8)
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, data={head})"

    # ------------------------------------------------------------------ #
    # graph machinery
    # ------------------------------------------------------------------ #

    def detach(self) -> "Tensor":
        """Same values, no gradient flow through the result."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be scalar.  By default the graph is freed afterwards;
        a second backward() then raises GraphFreedError.
        """
        if self.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if self._op and self._backward is None:
            raise GraphFreedError(
                "graph already freed; pass retain_graph=True to backward() to reuse it"
            )

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))

        # Gradients of op results are local to one pass; only leaves keep
        # accumulating across backward calls.
        for node in topo:
            if node._op:
                node.grad = np.zeros_like(node.data)
        if self._op:
            self.grad = np.ones_like(self.data)
        else:
            self.grad += 1.0
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
            if not retain_graph and node._op:
                node._backward = None
                node._parents = ()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce one non-Tensor operand, matching the Tensor operand's dtype.

    Keeps float32 graphs in float32: a bare python scalar must not drag a
    whole expression up to float64.
    """
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return _as_tensor(a), _as_tensor(b)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap an op result, attaching the graph only when a parent needs it."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = np.zeros_like(data) if out.requires_grad else None
    out._op = op
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------- #
# elementwise arithmetic
# ---------------------------------------------------------------------- #


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def _bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return _make(out, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def _bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.shape)

    return _make(out, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def _bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), _bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def _bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g / b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(-g * a.data / (b.data * b.data), b.shape)

    return _make(out, (a, b), _bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def _bw(g):
        if a.requires_grad:
            a.grad -= g

    return _make(-a.data, (a,), _bw, "neg")


def powi(a, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = _as_tensor(a)
    out = a.data ** exponent

    def _bw(g):
        if a.requires_grad:
            a.grad += g * exponent * a.data ** (exponent - 1)

    return _make(out, (a,), _bw, "pow")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def _bw(g):
        if a.requires_grad:
            a.grad += g * out

    return _make(out, (a,), _bw, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)

    def _bw(g):
        if a.requires_grad:
            a.grad += g / a.data

    return _make(np.log(a.data), (a,), _bw, "log")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def _bw(g):
        if a.requires_grad:
            a.grad += g * (1.0 - out * out)

    return _make(out, (a,), _bw, "tanh")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # Split by sign so neither exp() overflows.
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def _bw(g):
        if a.requires_grad:
            a.grad += g * out * (1.0 - out)

    return _make(out, (a,), _bw, "sigmoid")


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    """y = x for x >= 0, slope * x otherwise."""
    a = _as_tensor(a)
    mask = a.data >= 0
    out = np.where(mask, a.data, slope * a.data)

    def _bw(g):
        if a.requires_grad:
            a.grad += g * np.where(mask, 1.0, slope)

    return _make(out, (a,), _bw, "leaky_relu")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only inside the range."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def _bw(g):
        if a.requires_grad:
            a.grad += g * mask

    return _make(out, (a,), _bw, "clamp")


def detach(a: Tensor) -> Tensor:
    """Functional alias for Tensor.detach()."""
    return _as_tensor(a).detach()


# ---------------------------------------------------------------------- #
# matmul and softmax
# ---------------------------------------------------------------------- #


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supports 2-D times 2-D, stacked ``(..., m, k) @ (k, n)`` projections,
    and batched products where both operands share leading extents.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs at least 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatchError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def _bw(g):
        if a.requires_grad:
            a.grad += np.matmul(g, _swap_last(b.data))
        if b.requires_grad:
            gb = np.matmul(_swap_last(a.data), g)
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
            b.grad += gb

    return _make(out, (a, b), _bw, "matmul")


def softmax_lastdim(a) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        if a.requires_grad:
            inner = (g * out).sum(axis=-1, keepdims=True)
            a.grad += out * (g - inner)

    return _make(out, (a,), _bw, "softmax")


# ---------------------------------------------------------------------- #
# reductions
# ---------------------------------------------------------------------- #


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.grad += g
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.grad += np.broadcast_to(g, a.shape)

    return _make(np.asarray(out), (a,), _bw, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(a, axis: int) -> Tensor:
    """Maximum along one axis; gradient flows to the first arg-max entry."""
    a = _as_tensor(a)
    out = a.data.max(axis=axis)
    idx = a.data.argmax(axis=axis)

    def _bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.put_along_axis(buf, np.expand_dims(idx, axis),
                              np.expand_dims(g, axis), axis)
            a.grad += buf

    return _make(out, (a,), _bw, "max")


# ---------------------------------------------------------------------- #
# shape manipulation
# ---------------------------------------------------------------------- #


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def _bw(g):
        if a.requires_grad:
            a.grad += g.reshape(a.shape)

    return _make(a.data.reshape(shape), (a,), _bw, "reshape")


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _bw(g):
        if a.requires_grad:
            a.grad += g.transpose(inverse)

    return _make(a.data.transpose(axes), (a,), _bw, "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()

    def _bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)

    return _make(out, (a,), _bw, "broadcast_to")


def getitem(a, index) -> Tensor:
    """Basic (slice/int) indexing; the gradient scatters back."""
    a = _as_tensor(a)
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def _bw(g):
        if a.requires_grad:
            a.grad[index] += g

    return _make(out.copy(), (a,), _bw, "getitem")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([p.data for p in parts], axis=axis)
    extents = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + extents)

    def _bw(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                part.grad += g[tuple(sl)]

    return _make(out, parts, _bw, "concat")


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    out = np.stack([p.data for p in parts], axis=axis)

    def _bw(g):
        slices = np.moveaxis(g, axis, 0)
        for part, sl in zip(parts, slices):
            if part.requires_grad:
                part.grad += sl

    return _make(out, parts, _bw, "stack")


# ---------------------------------------------------------------------- #
# operator sugar
# ---------------------------------------------------------------------- #

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = lambda self, other: div(self, other)
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__pow__ = lambda self, exponent: powi(self, exponent)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.__getitem__ = lambda self, index: getitem(self, index)
Tensor.sum = tsum
Tensor.mean = tmean
Tensor.max = tmax
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
Tensor.transpose = lambda self, *axes: transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)
Tensor.exp = exp
Tensor.log = log
Tensor.tanh = tanh
Tensor.sigmoid = sigmoid
