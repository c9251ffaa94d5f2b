"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations always compute their value. They are recorded only while a
:class:`Tape` is active and at least one input requires a gradient, so the same
model code runs for training (inside a tape) and inference (outside one).

    >>> w = Node(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    ...     tape.backward(loss)
    >>> w.grad
    array([2., 2., 2.])

Broadcasting is limited to scalar-with-array; anything else needs :func:`expand`.
"""
from __future__ import annotations

import threading

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


class Tape:
    """Records nodes in creation order; ``backward`` may be called once."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def backward(self, loss: "Node") -> None:
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        loss = as_node(loss)
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        self.consumed = True
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
            if node is not loss:
                # intermediate gradients are not needed once propagated
                node.grad = None
        if loss.op != "leaf":
            loss.grad = None


def active_tape() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


class Node:
    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "vjp", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf", parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.parents = parents
        self.grad = None
        self.requires_grad = requires_grad
        self.vjp = vjp

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def const(x) -> Node:
    return Node(x)


def _make(value, op, parents, vjp) -> Node:
    req = any(p.requires_grad for p in parents)
    node = Node(value, requires_grad=req, op=op, parents=parents, vjp=vjp if req else None)
    if req:
        tape = active_tape()
        if tape is None:
            # no tape: behave as a constant
            node.requires_grad = False
            node.vjp = None
            node.parents = ()
        else:
            tape.nodes.append(node)
    return node


def _binary_shapes(op, a: Node, b: Node):
    sa, sb = a.value.shape, b.value.shape
    if sa == sb or a.value.size == 1 and a.value.ndim == 0 or b.value.size == 1 and b.value.ndim == 0:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# -- elementwise -------------------------------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _binary_shapes("add", a, b)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value + b.value, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _binary_shapes("sub", a, b)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value - b.value, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _binary_shapes("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _binary_shapes("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def scale(x, c: float) -> Node:
    x = as_node(x)
    c = float(c)
    return _make(x.value * c, "scale", (x,), lambda g: (g * c,))


def tanh(x) -> Node:
    x = as_node(x)
    y = np.tanh(x.value)
    return _make(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Node:
    x = as_node(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _make(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def relu(x) -> Node:
    """max(0, x); subgradient 0 at the kink."""
    x = as_node(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), "relu", (x,), lambda g: (g * mask,))


maximum0 = relu


def minimum0(x) -> Node:
    x = as_node(x)
    mask = x.value < 0
    return _make(np.where(mask, x.value, 0.0), "minimum0", (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2) -> Node:
    x = as_node(x)
    fac = np.where(x.value > 0, 1.0, slope)
    return _make(x.value * fac, "leaky_relu", (x,), lambda g: (g * fac,))


def exp(x) -> Node:
    x = as_node(x)
    y = np.exp(x.value)
    return _make(y, "exp", (x,), lambda g: (g * y,))


def square(x) -> Node:
    x = as_node(x)
    v = x.value
    return _make(v * v, "square", (x,), lambda g: (2.0 * g * v,))


def sqrt(x) -> Node:
    x = as_node(x)
    y = np.sqrt(x.value)
    return _make(y, "sqrt", (x,), lambda g: (0.5 * g / y,))


# -- structural --------------------------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    return _make(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def concat(xs, axis: int = -1) -> Node:
    xs = [as_node(x) for x in xs]
    vals = [x.value for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax)
                     for k in range(len(xs)))

    return _make(out, "concat", tuple(xs), vjp)


def stack(xs) -> Node:
    xs = [as_node(x) for x in xs]
    shapes = {x.value.shape for x in xs}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([x.value for x in xs])
    return _make(out, "stack", tuple(xs), lambda g: tuple(g[k] for k in range(len(xs))))


def slice_(x, idx) -> Node:
    x = as_node(x)
    shape = x.value.shape
    try:
        out = x.value[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) for p in parts)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, "slice", (x,), vjp)


def reshape(x, shape) -> Node:
    x = as_node(x)
    old = x.value.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _make(out, "reshape", (x,), lambda g: (g.reshape(old),))


def expand(x, shape) -> Node:
    """Explicit broadcast of ``x`` to ``shape``; the gradient sums over the new extent."""
    x = as_node(x)
    old = x.value.shape
    try:
        out = np.broadcast_to(x.value, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: {exc}") from None
    lead = len(shape) - len(old)

    def vjp(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(k for k, n in enumerate(old) if n == 1 and g.shape[k] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(np.array(out), "expand", (x,), vjp)


def sum_(x, axis=None) -> Node:
    x = as_node(x)
    shape = x.value.shape
    out = x.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(out, "sum", (x,), vjp)


def mean(x) -> Node:
    x = as_node(x)
    shape = x.value.shape
    n = x.value.size
    return _make(x.value.mean(), "mean", (x,), lambda g: (np.full(shape, float(g) / n),))


def gather(x, index) -> Node:
    """Rows ``x[index]`` along axis 0; the gradient is a scatter-add."""
    x = as_node(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.value.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"gather: index out of range for {n} rows")
    return _make(x.value[index], "gather", (x,),
                 lambda g: (kernels.scatter_add_rows(g, index, n),))


def scatter_add(x, index, n: int) -> Node:
    """Sum rows of ``x`` into ``n`` output rows; the gradient is a gather."""
    x = as_node(x)
    index = np.asarray(index, dtype=np.int64)
    if len(index) != x.value.shape[0]:
        raise ShapeError(f"scatter_add: {len(index)} indices for {x.value.shape[0]} rows")
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"scatter_add: index out of range for {n} rows")
    return _make(kernels.scatter_add_rows(x.value, index, n), "scatter_add", (x,),
                 lambda g: (g[index],))


# -- utilities ---------------------------------------------------------------------------

def numerical_gradient(f, arrays, eps: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of the scalar function ``f(*arrays)``."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            old = a[ix]
            a[ix] = old + eps
            fp = float(f(*arrays))
            a[ix] = old - eps
            fm = float(f(*arrays))
            a[ix] = old
            g[ix] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    den = max(float(np.linalg.norm(np.ravel(a))), float(np.linalg.norm(np.ravel(b))), floor)
    return num / den


def value_and_grad(f, arrays):
    """Evaluate ``f`` on fresh leaves built from ``arrays`` and return value and gradients."""
    leaves = [Node(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*leaves)
        tape.backward(out)
    return float(out.value), [l.grad if l.grad is not None else np.zeros_like(l.value)
                              for l in leaves]
