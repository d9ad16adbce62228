"""Reverse-mode automatic differentiation over dense numpy arrays.

Each :class:`Tensor` produced by an operation records its parents and a
closure that pushes the output gradient back to them. ``backward`` walks the
graph in reverse topological order. Precision follows the dtype of the input
arrays: float32 is the default working precision, float64 is used by the
gradient oracles.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes do not conform to the operation."""


class DomainError(ArithmeticError):
    """An operation was evaluated outside its mathematical domain."""


class NonFiniteError(ArithmeticError):
    """A forward value or gradient became NaN or infinite."""


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """Dense real array that participates in a differentiation graph."""

    __slots__ = ("data", "grad", "node_id", "op", "parents", "_backward", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None, *, _parents=(), _op="leaf"):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self.op = _op
        self.parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        for node in _topological_order(self):
            node.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    # operator sugar; everything routes through the named ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _lift(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, grad_fn) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, _parents=parents, _op=op)
    if out.requires_grad:
        out._backward = grad_fn
    return out


def _accumulate(node: Tensor, grad: np.ndarray) -> None:
    if not node.requires_grad:
        return
    grad = _unbroadcast(grad, node.shape).astype(node.dtype, copy=False)
    if node.grad is None:
        node.grad = grad.copy()
    else:
        node.grad = node.grad + grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    # same shape, scalar, or a trailing-axis broadcast such as (B, C) with (C,) or (B, 1)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shapes(a, b, "add")

    def grad_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), "add", grad_fn)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shapes(a, b, "sub")

    def grad_fn(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), "sub", grad_fn)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shapes(a, b, "mul")

    def grad_fn(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), "mul", grad_fn)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)

    def grad_fn(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), "scalar-mul", grad_fn)


def divide(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shapes(a, b, "divide")
    if np.any(b.data == 0):
        raise DomainError("divide: denominator contains exact zero")
    out = a.data / b.data

    def grad_fn(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * out / b.data)

    return _make(out, (a, b), "divide", grad_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def grad_fn(g):
        _accumulate(a, g * mask)

    return _make(np.where(mask, a.data, a.dtype.type(0)), (a,), "relu", grad_fn)


def exp(a: Tensor) -> Tensor:
    with np.errstate(under="ignore", over="ignore"):  # overflow is reported by _make
        out = np.exp(a.data)

    def grad_fn(g):
        _accumulate(a, g * out)

    return _make(out, (a,), "exp", grad_fn)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: argument contains non-positive values")

    def grad_fn(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), "log", grad_fn)


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def grad_fn(g):
        _accumulate(a, g * sign)

    return _make(np.abs(a.data), (a,), "abs", grad_fn)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt: argument contains negative values")
    out = np.sqrt(a.data)

    def grad_fn(g):
        # subgradient 0 at the kink keeps norms of zero vectors differentiable
        safe = np.where(out > 0, out, 1)
        _accumulate(a, np.where(out > 0, g / (2 * safe), 0))

    return _make(out, (a,), "sqrt", grad_fn)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient flows only where ``a > floor``."""
    floor = a.dtype.type(floor)
    mask = a.data > floor

    def grad_fn(g):
        _accumulate(a, g * mask)

    return _make(np.where(mask, a.data, floor), (a,), "clamp-min", grad_fn)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def grad_fn(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    with np.errstate(over="ignore", invalid="ignore"):  # reported by _make
        out = a.data @ b.data
    return _make(out, (a, b), "matmul", grad_fn)


def transpose(a: Tensor) -> Tensor:
    def grad_fn(g):
        _accumulate(a, g.T)

    return _make(a.data.T, (a,), "transpose", grad_fn)


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out, dtype=a.dtype), (a,), "sum", grad_fn)


def max_reduce(a: Tensor, axis: int = -1, keepdims: bool = False, exclude: np.ndarray | None = None) -> Tensor:
    """Maximum along ``axis``; entries flagged in ``exclude`` never win.

    The gradient is routed to a single winner per reduction, the lowest index
    among ties.
    """
    data = a.data
    if exclude is not None:
        exclude = np.broadcast_to(np.asarray(exclude, dtype=bool), a.shape)
        if np.any(exclude.all(axis=axis)):
            raise ShapeError("max_reduce: every entry along the axis is excluded")
        data = np.where(exclude, -np.inf, data)
    idx = np.argmax(data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(a.shape, dtype=a.dtype)
        np.put_along_axis(full, idx_k, g, axis=axis)
        _accumulate(a, full)

    return _make(out, (a,), "max-reduce", grad_fn)


# ---------------------------------------------------------------- composites


def stable_softmax(z: Tensor, axis: int = -1) -> Tensor:
    """Softmax with the per-row maximum subtracted before exponentiation.

    The shift does not rescue saturated rows: for large logit gaps the
    non-maximal probabilities still underflow to exactly zero.
    """
    shifted = sub(z, max_reduce(z, axis=axis, keepdims=True))
    e = exp(shifted)
    return divide(e, sum_(e, axis=axis, keepdims=True))


def lp_norm(a: Tensor, p: float, axis: int = -1) -> Tensor:
    """Row-wise p-norm for p in {1, 2, inf}."""
    if p == 1:
        return sum_(abs_(a), axis=axis)
    if p == 2:
        return sqrt(sum_(mul(a, a), axis=axis))
    if p == np.inf:
        return max_reduce(abs_(a), axis=axis)
    raise ValueError(f"unsupported norm order {p!r}")


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "matmul": matmul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sum": sum_,
    "max-reduce": max_reduce,
    "abs": abs_,
    "sqrt": sqrt,
    "divide": divide,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply the named operation; ``kind`` uses the hyphenated op names."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operation {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node.parents:
            if parent.node_id not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every node reachable from a scalar ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones(loss.shape, dtype=loss.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node.grad is not None:
            _check_finite(node.grad, f"backward through {node.op}")


def grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` via one backward pass."""
    leaf = Tensor(np.array(x), requires_grad=True)
    out = f(leaf)
    backward(out)
    if leaf.grad is None:
        return np.zeros_like(leaf.data)
    return leaf.grad


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient estimate of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    flat = x.reshape(-1)
    view = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x))
        flat[i] = orig - h
        down = float(f(x))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"f is not finite near coordinate {i}")
        view[i] = (up - down) / (2 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def iter_nodes(root: Tensor) -> Iterable[Tensor]:
    return iter(_topological_order(root))
