"""Reverse-mode automatic differentiation on dense float64 arrays.

Every operation creates a :class:`Node` whose value is computed eagerly.  The
gradient of a node is built out of ordinary graph operations, so a gradient
is itself a node that can be differentiated again (double backprop).

>>> x = var(3.0)
>>> (dx,) = grad(x * x, [x])
>>> float(dx.value)
6.0
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Node",
    "ShapeError",
    "UnboundInputError",
    "var",
    "const",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "transpose",
    "relu",
    "exp",
    "log",
    "square",
    "sqrt",
    "sum",
    "mean",
    "reshape",
    "broadcast",
    "sum_to",
    "select_rows",
    "scatter_rows",
    "dropout_apply",
    "topological_order",
    "forward",
    "gradient",
    "grad",
    "finite_diff_check",
]

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, message: str, node_id: int | None = None):
        self.op = op
        self.node_id = node_id
        where = f" (node {node_id})" if node_id is not None else ""
        super().__init__(f"{op}{where}: {message}")


class UnboundInputError(KeyError):
    pass


class Node:
    """A value in the computation graph.

    ``op`` is one of the operation kinds registered in this module, ``parents``
    the ordered operand nodes and ``attrs`` any static operation arguments
    (axis, target shape, row indices, mask, ...).
    """

    __slots__ = ("id", "op", "parents", "attrs", "value", "name")
    __array_priority__ = 100.0

    def __init__(self, op, parents, value, attrs=None, name=None):
        self.id = next(_ids)
        self.op = op
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.value = value
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self.op in ("input", "constant")

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, id={self.id}, shape={self.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, const(-1.0))

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("graph leaves must hold finite values")
    return arr


def var(value, name: str | None = None) -> Node:
    """Differentiable input (data or parameter)."""
    return Node("input", (), _as_array(value), name=name)


def const(value, name: str | None = None) -> Node:
    """Constant leaf; never receives a gradient."""
    return Node("constant", (), np.array(value, dtype=np.float64), name=name)


def _node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


# -- forward kernels --------------------------------------------------------


def _broadcast_shape(op, a, b):
    if a.ndim > 2 or b.ndim > 2:
        raise ShapeError(op, f"only up to 2-D operands are supported, got {a.shape} and {b.shape}")
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


def _k_binary(fn):
    def kernel(op, vals, attrs):
        a, b = vals
        _broadcast_shape(op, a, b)
        return fn(a, b)

    return kernel


def _k_matmul(op, vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(op, f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _k_transpose(op, vals, attrs):
    (a,) = vals
    if a.ndim != 2:
        raise ShapeError(op, f"transpose needs a matrix, got shape {a.shape}")
    return a.T.copy()


def _k_sum(op, vals, attrs):
    return np.sum(vals[0], axis=attrs["axis"], keepdims=attrs["keepdims"])


def _k_mean(op, vals, attrs):
    return np.mean(vals[0], axis=attrs["axis"], keepdims=attrs["keepdims"])


def _k_reshape(op, vals, attrs):
    (a,) = vals
    if a.size != int(np.prod(attrs["shape"], dtype=np.int64)):
        raise ShapeError(op, f"cannot reshape {a.shape} to {attrs['shape']}")
    return a.reshape(attrs["shape"])


def _k_broadcast(op, vals, attrs):
    (a,) = vals
    try:
        return np.array(np.broadcast_to(a, attrs["shape"]))
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} to {attrs['shape']}") from None


def _sum_to_array(a, shape):
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError("sum_to", f"cannot reduce {a.shape} to {shape}")
    out = a.sum(axis=tuple(range(lead))) if lead else a
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and out.shape[i] != 1)
    if axes:
        out = out.sum(axis=axes, keepdims=True)
    if out.shape != shape:
        raise ShapeError("sum_to", f"cannot reduce {a.shape} to {shape}")
    return out


def _k_sum_to(op, vals, attrs):
    return _sum_to_array(vals[0], attrs["shape"])


def _k_select_rows(op, vals, attrs):
    return vals[0][attrs["index"]]


def _k_scatter_rows(op, vals, attrs):
    (a,) = vals
    out = np.zeros((attrs["n_rows"],) + a.shape[1:])
    np.add.at(out, attrs["index"], a)
    return out


def _k_dropout(op, vals, attrs):
    (a,) = vals
    if attrs["mask"].shape != a.shape:
        raise ShapeError(op, f"mask shape {attrs['mask'].shape} does not match {a.shape}")
    return a * attrs["mask"]


def _k_log(op, vals, attrs):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(vals[0])


def _k_sqrt(op, vals, attrs):
    with np.errstate(invalid="ignore"):
        return np.sqrt(vals[0])


_KERNELS: dict[str, Callable] = {
    "add": _k_binary(np.add),
    "sub": _k_binary(np.subtract),
    "mul": _k_binary(np.multiply),
    "div": _k_binary(np.divide),
    "matmul": _k_matmul,
    "transpose": _k_transpose,
    "relu": lambda op, v, a: np.maximum(v[0], 0.0),
    "exp": lambda op, v, a: np.exp(v[0]),
    "log": _k_log,
    "square": lambda op, v, a: v[0] * v[0],
    "sqrt": _k_sqrt,
    "sum": _k_sum,
    "mean": _k_mean,
    "reshape": _k_reshape,
    "broadcast": _k_broadcast,
    "sum_to": _k_sum_to,
    "select_rows": _k_select_rows,
    "scatter_rows": _k_scatter_rows,
    "dropout": _k_dropout,
}


def _apply(op: str, parents: Sequence, **attrs) -> Node:
    parents = [_node(p) for p in parents]
    value = _KERNELS[op](op, [p.value for p in parents], attrs)
    return Node(op, parents, np.asarray(value, dtype=np.float64), attrs)


# -- public operations ------------------------------------------------------


def add(a, b) -> Node:
    return _apply("add", (a, b))


def sub(a, b) -> Node:
    return _apply("sub", (a, b))


def mul(a, b) -> Node:
    return _apply("mul", (a, b))


def div(a, b) -> Node:
    return _apply("div", (a, b))


def matmul(a, b) -> Node:
    return _apply("matmul", (a, b))


def transpose(a) -> Node:
    return _apply("transpose", (a,))


def relu(a) -> Node:
    return _apply("relu", (a,))


def exp(a) -> Node:
    return _apply("exp", (a,))


def log(a) -> Node:
    return _apply("log", (a,))


def square(a) -> Node:
    return _apply("square", (a,))


def sqrt(a) -> Node:
    return _apply("sqrt", (a,))


def _norm_axis(axis):
    if axis is None:
        return None
    return tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)


def sum(a, axis=None, keepdims=False) -> Node:  # noqa: A001
    return _apply("sum", (a,), axis=_norm_axis(axis), keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Node:
    return _apply("mean", (a,), axis=_norm_axis(axis), keepdims=keepdims)


def reshape(a, shape) -> Node:
    return _apply("reshape", (a,), shape=tuple(shape))


def broadcast(a, shape) -> Node:
    return _apply("broadcast", (a,), shape=tuple(shape))


def sum_to(a, shape) -> Node:
    """Sum ``a`` down to ``shape`` (the adjoint of :func:`broadcast`)."""
    a = _node(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _apply("sum_to", (a,), shape=shape)


def select_rows(a, index) -> Node:
    return _apply("select_rows", (a,), index=np.asarray(index, dtype=np.intp))


def scatter_rows(a, index, n_rows: int) -> Node:
    return _apply("scatter_rows", (a,), index=np.asarray(index, dtype=np.intp), n_rows=int(n_rows))


def dropout_apply(a, mask) -> Node:
    """Multiply by a fixed (already rescaled) dropout mask."""
    return _apply("dropout", (a,), mask=np.asarray(mask, dtype=np.float64))


# -- vector-Jacobian products, written with graph ops -----------------------


def _reduced_grad_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = {ax % len(shape) for ax in axis}
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def _vjp(node: Node, g: Node, need: Sequence[bool]) -> list[Node | None]:
    op, ps = node.op, node.parents
    out: list[Node | None] = [None] * len(ps)
    if op == "add":
        out = [sum_to(g, p.shape) for p in ps]
    elif op == "sub":
        out = [sum_to(g, ps[0].shape), sum_to(-g, ps[1].shape)]
    elif op == "mul":
        a, b = ps
        if need[0]:
            out[0] = sum_to(g * b, a.shape)
        if need[1]:
            out[1] = sum_to(g * a, b.shape)
    elif op == "div":
        a, b = ps
        if need[0]:
            out[0] = sum_to(g / b, a.shape)
        if need[1]:
            out[1] = sum_to(-(g * node) / b, b.shape)
    elif op == "matmul":
        a, b = ps
        if need[0]:
            out[0] = matmul(g, transpose(b))
        if need[1]:
            out[1] = matmul(transpose(a), g)
    elif op == "transpose":
        out = [transpose(g)]
    elif op == "relu":
        # strict mask: subgradient 0 at 0; constant under further differentiation
        out = [g * const((ps[0].value > 0).astype(np.float64))]
    elif op == "exp":
        out = [g * node]
    elif op == "log":
        out = [g / ps[0]]
    elif op == "square":
        out = [g * ps[0] * 2.0]
    elif op == "sqrt":
        out = [g / (node * 2.0)]
    elif op in ("sum", "mean"):
        a = ps[0]
        gr = reshape(g, _reduced_grad_shape(a.shape, node.attrs["axis"]))
        gb = broadcast(gr, a.shape)
        if op == "mean":
            count = a.value.size // max(node.value.size, 1)
            gb = gb * (1.0 / count)
        out = [gb]
    elif op == "reshape":
        out = [reshape(g, ps[0].shape)]
    elif op == "broadcast":
        out = [sum_to(g, ps[0].shape)]
    elif op == "sum_to":
        out = [broadcast(g, ps[0].shape)]
    elif op == "select_rows":
        out = [scatter_rows(g, node.attrs["index"], ps[0].shape[0])]
    elif op == "scatter_rows":
        out = [select_rows(g, node.attrs["index"])]
    elif op == "dropout":
        out = [dropout_apply(g, node.attrs["mask"])]
    else:  # pragma: no cover - every registered op is handled above
        raise NotImplementedError(op)
    return out


# -- graph traversal --------------------------------------------------------


def topological_order(outputs: Iterable[Node]) -> list[Node]:
    """Nodes reachable from ``outputs``, parents before children."""
    order: list[Node] = []
    seen: set[int] = set()
    for root in outputs:
        if root.id in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in reversed(node.parents):
                if p.id not in seen:
                    stack.append((p, False))
    return order


def forward(outputs: Sequence[Node], bindings: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Re-evaluate the graph behind ``outputs`` with new input values.

    ``bindings`` maps input-node ids to arrays; every input reachable from
    ``outputs`` must be bound, with its original shape.  Returns a mapping of
    node id to value and leaves the stored node values untouched.
    """
    values: dict[int, np.ndarray] = {}
    for node in topological_order(outputs):
        if node.op == "input":
            if node.id not in bindings:
                raise UnboundInputError(f"input node {node.id} ({node.name or 'unnamed'}) is not bound")
            v = np.asarray(bindings[node.id], dtype=np.float64)
            if v.shape != node.shape:
                raise ShapeError("input", f"bound value has shape {v.shape}, expected {node.shape}", node.id)
            values[node.id] = v
        elif node.op == "constant":
            values[node.id] = node.value
        else:
            try:
                v = _KERNELS[node.op](node.op, [values[p.id] for p in node.parents], node.attrs)
            except ShapeError as exc:
                raise ShapeError(node.op, str(exc), node.id) from None
            values[node.id] = np.asarray(v, dtype=np.float64)
    return values


def gradient(target: Node, wrt: Sequence[Node]) -> dict[int, Node]:
    """Build d(target)/d(w) for every node in ``wrt``.

    Returns a mapping from each requested node id to a new node holding the
    gradient.  The new nodes are ordinary graph nodes and can be passed to
    another :func:`gradient` call.  Nodes that ``target`` does not depend on
    get a constant zero gradient.
    """
    if target.value.size != 1:
        raise ValueError(f"gradient target must be scalar, got shape {target.shape}")
    wrt_ids = {w.id for w in wrt}
    order = topological_order([target])
    live: set[int] = set()
    for node in order:
        if node.id in wrt_ids or any(p.id in live for p in node.parents):
            live.add(node.id)

    grads: dict[int, Node] = {target.id: const(np.ones(target.shape))}
    if target.id not in live:
        order = []
    for node in reversed(order):
        g = grads.get(node.id)
        if g is None or node.is_leaf:
            continue
        need = [p.id in live for p in node.parents]
        if not any(need):
            continue
        for p, needed, pg in zip(node.parents, need, _vjp(node, g, need)):
            if not needed or pg is None:
                continue
            prev = grads.get(p.id)
            grads[p.id] = pg if prev is None else add(prev, pg)

    return {w.id: grads.get(w.id) or const(np.zeros(w.shape)) for w in wrt}


def grad(target: Node, wrt: Sequence[Node]) -> list[Node]:
    """List form of :func:`gradient`, in the order of ``wrt``."""
    gm = gradient(target, wrt)
    return [gm[w.id] for w in wrt]


def finite_diff_check(builder: Callable[[Node], Node], point, eps: float = 1e-5) -> float:
    """Compare the autodiff gradient of ``builder`` with central differences.

    ``builder`` maps an input node to a scalar node.  Returns the largest
    ``|g_ad - g_fd| / max(1, |g_fd|)`` over coordinates.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    point = np.array(point, dtype=np.float64)
    x = var(point)
    target = builder(x)
    g_ad = grad(target, [x])[0].value
    if not (np.isfinite(target.value).all() and np.isfinite(g_ad).all()):
        raise FloatingPointError("non-finite value or gradient at the check point")

    g_fd = np.empty_like(point)
    flat = g_fd.reshape(-1)
    for i in range(point.size):
        hi = point.copy().reshape(-1)
        lo = point.copy().reshape(-1)
        hi[i] += eps
        lo[i] -= eps
        f_hi = builder(const(hi.reshape(point.shape))).value
        f_lo = builder(const(lo.reshape(point.shape))).value
        flat[i] = (float(f_hi) - float(f_lo)) / (2 * eps)
    if not np.all(np.isfinite(g_fd)):
        raise FloatingPointError("non-finite finite-difference estimate")
    return float(np.max(np.abs(g_ad - g_fd) / np.maximum(1.0, np.abs(g_fd)), initial=0.0))
