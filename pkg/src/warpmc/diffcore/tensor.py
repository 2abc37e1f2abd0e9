"""A small reverse-mode autodiff engine on numpy arrays.

Each op builds a node holding its value, its parents and a closure mapping
the output gradient to parent gradients. ``backward`` sweeps the graph in
reverse topological order. Everything is float64.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name", "op")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents: tuple = ()
        self.backward_fn = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"

    # numpy-ish conveniences
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], tuple) else axes)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _value(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _make(value, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(value)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise binary ops
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (unbroadcast(g * bv, a.shape), unbroadcast(g * av, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (unbroadcast(g / bv, a.shape), unbroadcast(-g * out / bv, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy semantics (both operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(av @ bv, (a, b), bw, "matmul")


def affine(x, weight, bias) -> Tensor:
    """x @ W + b."""
    return add(matmul(x, weight), bias)


# elementwise unary ops
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    s = sigmoid_np(x)
    return _make(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), "silu")


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(av**p, (a,), lambda g: (g * p * av ** (p - 1),), "pow")


def clip(a, lo: float, hi: float) -> Tensor:
    """Hard clip; gradient passes only where the input is strictly inside."""
    a = as_tensor(a)
    mask = (a.value > lo) & (a.value < hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,), "clip")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# reductions and shape ops
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ValueError(f"broadcast: cannot broadcast {old} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (unbroadcast(g, old),), "broadcast")


def getitem(a, idx) -> Tensor:
    """Basic slicing/indexing; advanced indices are scattered back with add.at."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), bw, "slice")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, ts, bw, "concat")


def embedding(table, ids) -> Tensor:
    """Gather rows ``table[ids]`` for integer ``ids`` of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding: ids outside [0, {table.shape[0]})")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(table.value[ids], (table,), bw, "embedding")


def custom_op(value, parents: Sequence[Tensor], backward_fn: Callable, name: str = "custom") -> Tensor:
    """Wrap a numpy value with a user-supplied backward rule."""
    return _make(np.asarray(value, dtype=np.float64), [as_tensor(p) for p in parents], backward_fn, name)


def energy_op(potential, positions) -> Tensor:
    """U(x) as a graph node; the backward pass uses the analytic gradient."""
    x = as_tensor(positions)
    if _grad_enabled and x.requires_grad:
        e, grad_u = potential.energy_and_gradient(x.value)
        return _make(e, (x,), lambda g: (np.asarray(g)[..., None, None] * grad_u,), "energy")
    return Tensor(potential.energy(x.value))


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d loss / d leaf into ``.grad`` of every leaf requiring grad."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if grad is None:
        if loss.value.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        grad = np.ones_like(loss.value)
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _topological_order(root: Tensor) -> list:
    """Iterative DFS post-order; a back edge means the graph has a cycle."""
    order, state = [], {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        key = id(node)
        if done:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise GraphError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            if not p.requires_grad:
                continue
            ps = state.get(id(p))
            if ps == 1:
                raise GraphError("cycle detected in computation graph")
            if ps is None:
                stack.append((p, False))
    return order
