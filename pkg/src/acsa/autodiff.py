"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built eagerly while the forward pass runs.  Every primitive is
registered in ``_PRIMITIVES`` as a pair of functions: one computing the
forward value and one mapping the upstream gradient to input gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LOG_FLOOR = 1e-12

CATEGORIES = ("per_aspect", "shared", "bilstm", "embedding")


class ShapeError(ValueError):
    pass


class Node:
    """A value in the differentiation graph."""

    __slots__ = ("value", "grad", "parents", "op", "attrs", "requires_grad", "name")

    def __init__(self, value, parents=(), op=None, attrs=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self.attrs = attrs or {}
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def is_leaf(self):
        return not self.parents

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.name or self.op or "leaf"
        return f"Node({tag}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_node(other)))

    def __rsub__(self, other):
        return add(as_node(other), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def parameter(value, name=None) -> Node:
    return Node(np.array(value, dtype=DTYPE), requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


# ---------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    backward: Callable
    arity: int | None  # None means variadic


_PRIMITIVES: dict[str, Primitive] = {}


def _register(tag, arity=1):
    def wrap(fns):
        fwd, bwd = fns()
        _PRIMITIVES[tag] = Primitive(fwd, bwd, arity)
        return fns

    return wrap


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(tag, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{tag}: incompatible shapes {a.shape} and {b.shape}") from None


@_register("add", 2)
def _add():
    def fwd(vals, attrs):
        return vals[0] + vals[1]

    def bwd(g, vals, out, attrs):
        return _unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)

    return fwd, bwd


@_register("mul", 2)
def _mul():
    def fwd(vals, attrs):
        return vals[0] * vals[1]

    def bwd(g, vals, out, attrs):
        a, b = vals
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return fwd, bwd


@_register("matmul", 2)
def _matmul():
    def fwd(vals, attrs):
        return np.matmul(vals[0], vals[1])

    def bwd(g, vals, out, attrs):
        a, b = vals
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            # fold batch dims into one product instead of summing per-batch outer products
            k, m = b.shape
            gb = a.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return fwd, bwd


@_register("neg")
def _neg():
    return (lambda vals, attrs: -vals[0]), (lambda g, vals, out, attrs: (-g,))


@_register("scale")
def _scale():
    def fwd(vals, attrs):
        return vals[0] * attrs["c"]

    def bwd(g, vals, out, attrs):
        return (g * attrs["c"],)

    return fwd, bwd


@_register("tanh")
def _tanh():
    return (lambda vals, attrs: np.tanh(vals[0])), (lambda g, vals, out, attrs: (g * (1.0 - out * out),))


def _sigmoid_value(x):
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@_register("sigmoid")
def _sigmoid():
    def fwd(vals, attrs):
        return _sigmoid_value(vals[0])

    def bwd(g, vals, out, attrs):
        return (g * out * (1.0 - out),)

    return fwd, bwd


@_register("relu")
def _relu():
    return (lambda vals, attrs: np.maximum(vals[0], 0.0)), (lambda g, vals, out, attrs: (g * (vals[0] > 0),))


@_register("log")
def _log():
    def fwd(vals, attrs):
        return np.log(np.maximum(vals[0], LOG_FLOOR))

    def bwd(g, vals, out, attrs):
        x = vals[0]
        return (np.where(x >= LOG_FLOOR, g / np.maximum(x, LOG_FLOOR), 0.0),)

    return fwd, bwd


@_register("clip")
def _clip():
    def fwd(vals, attrs):
        return np.clip(vals[0], attrs["lo"], attrs["hi"])

    def bwd(g, vals, out, attrs):
        x = vals[0]
        return (g * ((x >= attrs["lo"]) & (x <= attrs["hi"])),)

    return fwd, bwd


@_register("softmax")
def _softmax():
    def fwd(vals, attrs):
        x = vals[0]
        axis = attrs["axis"]
        z = np.exp(x - x.max(axis=axis, keepdims=True))
        return z / z.sum(axis=axis, keepdims=True)

    def bwd(g, vals, out, attrs):
        axis = attrs["axis"]
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return fwd, bwd


@_register("sum")
def _sum():
    def fwd(vals, attrs):
        return np.sum(vals[0], axis=attrs["axis"], keepdims=attrs["keepdims"])

    def bwd(g, vals, out, attrs):
        x = vals[0]
        axis = attrs["axis"]
        if axis is not None and not attrs["keepdims"]:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return fwd, bwd


@_register("concat", None)
def _concat():
    def fwd(vals, attrs):
        return np.concatenate(vals, axis=attrs["axis"])

    def bwd(g, vals, out, attrs):
        axis = attrs["axis"]
        bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return tuple(np.split(g, bounds, axis=axis))

    return fwd, bwd


@_register("stack", None)
def _stack():
    def fwd(vals, attrs):
        return np.stack(vals, axis=attrs["axis"])

    def bwd(g, vals, out, attrs):
        axis = attrs["axis"]
        return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))

    return fwd, bwd


@_register("reshape")
def _reshape():
    def fwd(vals, attrs):
        return vals[0].reshape(attrs["shape"])

    def bwd(g, vals, out, attrs):
        return (g.reshape(vals[0].shape),)

    return fwd, bwd


def _is_basic_index(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis or k is None for k in parts)


@_register("index")
def _index():
    def fwd(vals, attrs):
        return vals[0][attrs["key"]]

    def bwd(g, vals, out, attrs):
        full = np.zeros_like(vals[0])
        key = attrs["key"]
        if _is_basic_index(key):
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return fwd, bwd


@_register("gather")
def _gather():
    # rows of a table selected by an integer array of any shape
    def fwd(vals, attrs):
        return vals[0][attrs["ids"]]

    def bwd(g, vals, out, attrs):
        table = vals[0]
        full = np.zeros_like(table)
        np.add.at(full, attrs["ids"].reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return fwd, bwd


def _check_shapes(tag, vals, attrs):
    if tag in ("add", "mul"):
        _check_broadcast(tag, vals[0], vals[1])
    elif tag == "matmul":
        a, b = vals
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} and {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul: batch dimensions differ, {a.shape} and {b.shape}") from None
    elif tag in ("concat", "stack"):
        axis = attrs["axis"]
        shapes = [v.shape for v in vals]
        if not vals:
            raise ShapeError(f"{tag}: no inputs")
        ref = list(shapes[0])
        for s in shapes[1:]:
            other = list(s)
            if len(other) != len(ref):
                raise ShapeError(f"{tag}: rank mismatch, {tuple(ref)} and {s}")
            if tag == "concat":
                ax = axis % len(ref)
                other[ax] = ref[ax]
            if other != ref:
                raise ShapeError(f"{tag}: incompatible shapes {tuple(ref)} and {s}")
    elif tag == "reshape":
        if int(np.prod(attrs["shape"])) != vals[0].size and -1 not in attrs["shape"]:
            raise ShapeError(f"reshape: cannot reshape {vals[0].shape} to {attrs['shape']}")


def apply_primitive(op_tag: str, inputs: Sequence, **attrs) -> Node:
    """Run primitive ``op_tag`` forward and record its backward rule."""
    prim = _PRIMITIVES.get(op_tag)
    if prim is None:
        raise KeyError(f"unknown primitive {op_tag!r}")
    nodes = [as_node(x) for x in inputs]
    if prim.arity is not None and len(nodes) != prim.arity:
        raise ValueError(f"{op_tag}: expected {prim.arity} inputs, got {len(nodes)}")
    vals = [n.value for n in nodes]
    _check_shapes(op_tag, vals, attrs)
    out = prim.forward(vals, attrs)
    requires_grad = any(n.requires_grad for n in nodes)
    # constant subgraphs keep no history
    parents = nodes if requires_grad else ()
    return Node(out, parents=parents, op=op_tag, attrs=attrs, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# functional API


def add(a, b):
    return apply_primitive("add", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def neg(a):
    return apply_primitive("neg", (a,))


def scale(a, c: float):
    return apply_primitive("scale", (a,), c=float(c))


def tanh(a):
    return apply_primitive("tanh", (a,))


def sigmoid(a):
    return apply_primitive("sigmoid", (a,))


def relu(a):
    return apply_primitive("relu", (a,))


def log(a):
    return apply_primitive("log", (a,))


def clip(a, lo: float, hi: float):
    return apply_primitive("clip", (a,), lo=lo, hi=hi)


def softmax(a, axis: int = -1):
    return apply_primitive("softmax", (a,), axis=axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return apply_primitive("sum", (a,), axis=axis, keepdims=keepdims)


def concat(nodes, axis: int = -1):
    return apply_primitive("concat", tuple(nodes), axis=axis)


def stack(nodes, axis: int = 0):
    return apply_primitive("stack", tuple(nodes), axis=axis)


def reshape(a, shape):
    return apply_primitive("reshape", (a,), shape=tuple(shape))


def index(a, key):
    return apply_primitive("index", (a,), key=key)


def gather(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    return apply_primitive("gather", (table,), ids=ids)


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))
    return order


def backward(root: Node, retain_graph: bool = False) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every node needing it."""
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.value.shape}")
    if not root.requires_grad:
        return
    order = _topological_order(root)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if not node.parents or node.grad is None:
            continue
        prim = _PRIMITIVES[node.op]
        grads = prim.backward(node.grad, [p.value for p in node.parents], node.value, node.attrs)
        for parent, g in zip(node.parents, grads):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=DTYPE).reshape(parent.value.shape)
            else:
                parent.grad = parent.grad + g
        if not retain_graph:
            node.parents = ()


# ---------------------------------------------------------------------------
# parameter groups and utilities


@dataclass
class ParamGroup:
    name: str
    nodes: list[Node]
    category: str
    aspect: int | None = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown parameter category {self.category!r}")
        if (self.category == "per_aspect") != (self.aspect is not None):
            raise ValueError(f"group {self.name!r}: aspect index required iff category is per_aspect")

    def size(self, trainable_only=True) -> int:
        return int(np.sum([n.value.size for n in self.nodes if n.requires_grad or not trainable_only]))


def zero_grads(groups: Iterable[ParamGroup]) -> None:
    for g in groups:
        for n in g.nodes:
            n.grad = None


def clip_gradient_norm(nodes, max_norm: float, global_norm: bool = False) -> None:
    """Rescale gradients whose L2 norm exceeds ``max_norm``.

    By default every tensor is clipped by its own norm.  With
    ``global_norm=True`` all tensors are scaled by a common factor computed
    from their joint norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    if isinstance(nodes, ParamGroup):
        nodes = nodes.nodes
    nodes = [n for n in nodes if n.grad is not None]
    if global_norm:
        total = np.sqrt(np.sum([np.sum(n.grad * n.grad) for n in nodes])) if nodes else 0.0
        if total > max_norm:
            for n in nodes:
                n.grad = n.grad * (max_norm / total)
        return
    for n in nodes:
        norm = np.sqrt(np.sum(n.grad * n.grad))
        if norm > max_norm:
            n.grad = n.grad * (max_norm / norm)


class NondeterministicLoss(RuntimeError):
    pass


def finite_diff_check(loss_fn: Callable[[], Node], groups: Sequence[ParamGroup], eps: float = 1e-5) -> dict[str, float]:
    """Compare analytic gradients with central differences, scalar by scalar.

    Returns the maximum relative error per group, where the relative error of
    one scalar is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    zero_grads(groups)
    loss = loss_fn()
    backward(loss)
    again = loss_fn()
    if not np.array_equal(loss.value, again.value):
        raise NondeterministicLoss("loss_fn returned different values on identical parameters")

    report = {}
    for group in groups:
        worst = 0.0
        for node in group.nodes:
            if not node.requires_grad:
                continue
            analytic = np.zeros_like(node.value) if node.grad is None else node.grad.copy()
            flat = node.value.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(loss_fn().value)
                flat[i] = orig - eps
                down = float(loss_fn().value)
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
        report[group.name] = worst
    zero_grads(groups)
    return report
