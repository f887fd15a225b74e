"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure that pushes the output gradient
back to them. ``backward`` walks the recorded graph once in reverse
topological order.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self):
        return total(self)

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, fn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if no_grad._depth == 0 and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # gradients may alias other nodes' arrays, so never update them in place
    if t.grad is None:
        t.grad = g if g.dtype == t.data.dtype else g.astype(t.data.dtype)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b, "add")

    def fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", fn)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b, "sub")

    def fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def fn(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), "scale", fn)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b, "mul")

    def fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner
        _accumulate(x, g * d)

    return _make(out, (x,), "gelu", fn)


# -- linear algebra and shape ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul with numpy broadcasting over leading axes."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                ga = a.data.reshape(-1, a.shape[-1])
                _accumulate(b, ga.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), "matmul", fn)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))

    def fn(g):
        _accumulate(x, np.transpose(g, inv))

    return _make(np.transpose(x.data, axes), (x,), "transpose", fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    src = x.shape

    def fn(g):
        _accumulate(x, g.reshape(src))

    return _make(out, (x,), "reshape", fn)


def gather(x: Tensor, index, axis: int = 0) -> Tensor:
    """Select entries along ``axis``.

    A 1-D ``index`` is shared across leading axes. A 2-D ``index`` of shape
    (x.shape[0], k) with ``axis=1`` picks a different row set per batch item.
    """
    index = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim
    if index.ndim == 1:
        if index.size and (index.min() < -x.shape[axis] or index.max() >= x.shape[axis]):
            raise ShapeError(f"gather: index out of range for axis {axis} of {x.shape}")
        out = np.take(x.data, index, axis=axis)

        def fn(g):
            if not x.requires_grad:
                return
            full = np.zeros_like(x.data)
            sl = [slice(None)] * x.ndim
            sl[axis] = index
            np.add.at(full, tuple(sl), g)
            _accumulate(x, full)

    elif index.ndim == 2 and axis == 1:
        if index.shape[0] != x.shape[0]:
            raise ShapeError(f"gather: batch index {index.shape} does not match {x.shape}")
        rows = np.arange(x.shape[0])[:, None]
        out = x.data[rows, index]

        def fn(g):
            if not x.requires_grad:
                return
            full = np.zeros_like(x.data)
            np.add.at(full, (rows, index), g)
            _accumulate(x, full)

    else:
        raise ShapeError(f"gather: unsupported index shape {index.shape} on axis {axis}")
    return _make(out, (x,), "gather", fn)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    axis = axis % parts[0].ndim
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(p.ndim) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {parts[0].shape} and {p.shape}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def fn(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(sl)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, "concat", fn)


# -- normalization -----------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine terms."""
    d = x.shape[-1]
    for t, label in ((gamma, "gamma"), (beta, "beta")):
        if t is not None and t.shape != (d,):
            raise ShapeError(f"layer_norm: {label} shape {t.shape} does not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = tuple(t for t in (x, gamma, beta) if t is not None)

    def fn(g):
        lead = tuple(range(g.ndim - 1))
        if gamma is not None and gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=lead))
        if beta is not None and beta.requires_grad:
            _accumulate(beta, g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gamma.data if gamma is not None else g
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (gx - m1 - xhat * m2))

    return _make(out, parents, "layer_norm", fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    y = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def fn(g):
        gy = g * y
        gy -= y * gy.sum(axis=-1, keepdims=True)
        _accumulate(x, gy)

    return _make(y, (x,), "softmax", fn)


# -- reductions --------------------------------------------------------------

def total(x: Tensor) -> Tensor:
    def fn(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum()), (x,), "sum", fn)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def fn(g):
        _accumulate(x, np.broadcast_to(g / n, x.shape))

    return _make(np.asarray(x.data.mean()), (x,), "mean", fn)


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared elementwise differences."""
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size

    def fn(g):
        gd = (2.0 / n) * g * diff
        _accumulate(pred, gd)
        _accumulate(target, -gd)

    return _make(np.asarray((diff * diff).mean()), (pred, target), "mse", fn)


# -- graph traversal ---------------------------------------------------------

def topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss) to every reachable leaf that requires a gradient.

    Returns a map from leaf tensors to their gradients; intermediate
    gradients are released as soon as they have been consumed.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return grads
    order = topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None:
            if node.requires_grad:
                grads[node] = node.grad if node.grad is not None else np.zeros_like(node.data)
            continue
        g = node.grad
        if g is not None:
            node._backward(g)
        node.grad = None
    return grads


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


class no_grad:
    """Context manager that stops graph recording (inference only)."""

    _depth = 0

    def __enter__(self):
        no_grad._depth += 1
        return self

    def __exit__(self, *exc):
        no_grad._depth -= 1
        return False


def grad_enabled() -> bool:
    return no_grad._depth == 0
