"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Everything is 64-bit: the loss margins (kappa around 50) and the smallest
noise scales (1e-2) in this toolkit do not coexist with float32.

Deliberate restrictions that keep the correctness surface small:

- no implicit broadcasting except scalar-with-tensor; matrix-plus-row-vector
  and matrix-times-row-vector have their own explicit ops (``add_bias``,
  ``scale_columns``), anything else needs an explicit ``reshape``,
- ``reduce_max`` routes the gradient to the first maximal index on ties,
- ``clip`` passes the gradient unchanged strictly inside (lo, hi) and zero
  at or outside the bounds,
- ``relu`` uses the zero subgradient at the kink,
- a tape is single-use: ``backward`` consumes it, a second call raises.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "AutodiffError",
    "ShapeMismatch",
    "TapeError",
    "NonFiniteError",
    "add",
    "subtract",
    "multiply",
    "matmul",
    "add_bias",
    "scale_columns",
    "relu",
    "softmax",
    "log_softmax",
    "log",
    "exp",
    "clip",
    "reduce_max",
    "reduce_sum",
    "reduce_mean",
    "l2norm",
    "concat",
    "reshape",
    "backward",
]


class AutodiffError(Exception):
    """Base class for tape construction and traversal failures."""


class ShapeMismatch(AutodiffError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class TapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class Tensor:
    """Dense float64 array with optional participation in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._spent = False
        if requires_grad and not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor contains NaN or Inf")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    # operator sugar; scalars are lifted to constant tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def max(self, axis=None):
        return reduce_max(self, axis)

    def relu(self):
        return relu(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.data.ndim == 0 and np.ndim(g) != 0:
        g = np.sum(g)
    t.grad = g if t.grad is None else t.grad + g


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeMismatch(op, a.shape, b.shape)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise("add", a, b)
    out_data = a.data + b.data

    def grad_fn(out):
        _accum(a, out.grad)
        _accum(b, out.grad)

    return _node(out_data, (a, b), grad_fn)


def subtract(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise("subtract", a, b)
    out_data = a.data - b.data

    def grad_fn(out):
        _accum(a, out.grad)
        _accum(b, -out.grad)

    return _node(out_data, (a, b), grad_fn)


def multiply(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise("multiply", a, b)
    out_data = a.data * b.data

    def grad_fn(out):
        _accum(a, out.grad * b.data)
        _accum(b, out.grad * a.data)

    return _node(out_data, (a, b), grad_fn)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out_data = a.data @ b.data

    def grad_fn(out):
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)

    return _node(out_data, (a, b), grad_fn)


def add_bias(m, b) -> Tensor:
    """Row-broadcast add: (n, h) matrix plus length-h vector."""
    m, b = _lift(m), _lift(b)
    if m.ndim != 2 or b.ndim != 1 or m.shape[1] != b.shape[0]:
        raise ShapeMismatch("add_bias", m.shape, b.shape)
    out_data = m.data + b.data

    def grad_fn(out):
        _accum(m, out.grad)
        _accum(b, out.grad.sum(axis=0))

    return _node(out_data, (m, b), grad_fn)


def scale_columns(m, s) -> Tensor:
    """Column-broadcast multiply: (n, h) matrix times length-h vector."""
    m, s = _lift(m), _lift(s)
    if m.ndim != 2 or s.ndim != 1 or m.shape[1] != s.shape[0]:
        raise ShapeMismatch("scale_columns", m.shape, s.shape)
    out_data = m.data * s.data

    def grad_fn(out):
        _accum(m, out.grad * s.data)
        _accum(s, (out.grad * m.data).sum(axis=0))

    return _node(out_data, (m, s), grad_fn)


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0)

    def grad_fn(out):
        _accum(a, out.grad * mask)

    return _node(out_data, (a,), grad_fn)


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(out):
        g = out.grad
        _accum(a, y * (g - np.sum(g * y, axis=axis, keepdims=True)))

    return _node(y, (a,), grad_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out_data = shifted - lse
    y = np.exp(out_data)

    def grad_fn(out):
        g = out.grad
        _accum(a, g - y * np.sum(g, axis=axis, keepdims=True))

    return _node(out_data, (a,), grad_fn)


def log(a) -> Tensor:
    a = _lift(a)
    out_data = np.log(a.data)

    def grad_fn(out):
        _accum(a, out.grad / a.data)

    return _node(out_data, (a,), grad_fn)


def exp(a) -> Tensor:
    a = _lift(a)
    out_data = np.exp(a.data)

    def grad_fn(out):
        _accum(a, out.grad * out_data)

    return _node(out_data, (a,), grad_fn)


def clip(a, lo: float, hi: float) -> Tensor:
    a = _lift(a)
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def grad_fn(out):
        _accum(a, out.grad * inside)

    return _node(out_data, (a,), grad_fn)


def reduce_max(a, axis=None) -> Tensor:
    a = _lift(a)
    if axis is None:
        out_data = np.max(a.data)
        flat_idx = int(np.argmax(a.data))

        def grad_fn(out):
            da = np.zeros_like(a.data)
            da.flat[flat_idx] = out.grad
            _accum(a, da)

    else:
        out_data = np.max(a.data, axis=axis)
        idx = np.argmax(a.data, axis=axis)

        def grad_fn(out):
            da = np.zeros_like(a.data)
            np.put_along_axis(
                da, np.expand_dims(idx, axis), np.expand_dims(out.grad, axis), axis=axis
            )
            _accum(a, da)

    return _node(out_data, (a,), grad_fn)


def reduce_sum(a, axis=None) -> Tensor:
    a = _lift(a)
    out_data = np.sum(a.data, axis=axis)

    def grad_fn(out):
        if axis is None:
            _accum(a, np.full_like(a.data, out.grad))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(out.grad, axis), a.shape).copy())

    return _node(out_data, (a,), grad_fn)


def reduce_mean(a, axis=None) -> Tensor:
    a = _lift(a)
    n = a.size if axis is None else a.shape[axis]
    out_data = np.mean(a.data, axis=axis)

    def grad_fn(out):
        if axis is None:
            _accum(a, np.full_like(a.data, out.grad / n))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(out.grad / n, axis), a.shape).copy())

    return _node(out_data, (a,), grad_fn)


def l2norm(a, axis=None) -> Tensor:
    """Euclidean norm; the subgradient at zero is zero."""
    a = _lift(a)
    out_data = np.sqrt(np.sum(a.data * a.data, axis=axis))

    def grad_fn(out):
        safe = np.where(out_data > 0, out_data, 1.0)
        factor = out.grad / safe * (out_data > 0)
        if axis is not None:
            factor = np.expand_dims(factor, axis)
        _accum(a, a.data * factor)

    return _node(out_data, (a,), grad_fn)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeMismatch("concat")
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base):
            raise ShapeMismatch("concat", parts[0].shape, p.shape)
        if other[:axis] + other[axis + 1 :] != base[:axis] + base[axis + 1 :]:
            raise ShapeMismatch("concat", parts[0].shape, p.shape)
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(out):
        pieces = np.split(out.grad, offsets, axis=axis)
        for p, piece in zip(parts, pieces):
            _accum(p, piece)

    return _node(out_data, tuple(parts), grad_fn)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out_data = a.data.reshape(shape)

    def grad_fn(out):
        _accum(a, out.grad.reshape(a.shape))

    return _node(out_data, (a,), grad_fn)


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar root into every reachable leaf.

    Consumes the tape: interior nodes are marked spent and a second pass
    over any of them raises TapeError.
    """
    if root.data.size != 1:
        raise TapeError(f"backward root must be scalar, got shape {root.shape}")
    if root._grad_fn is None and not root.requires_grad:
        raise TapeError("backward on a tensor with an empty tape")
    if not np.all(np.isfinite(root.data)):
        raise NonFiniteError("backward root is not finite")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._grad_fn is not None and node._spent:
            raise TapeError("tape already consumed by a previous backward")
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._grad_fn is not None:
            node._grad_fn(node)
            node._spent = True
