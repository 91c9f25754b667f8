"""Dense tensor arithmetic, tape-free reverse-mode differentiation, and seeded RNG.

Values are plain numpy arrays. A :class:`Node` wraps one value together with
the vector-Jacobian product that maps the upstream gradient onto its parents.
Graphs are built eagerly by calling the primitives below; gradients are pulled
back with :func:`forward_backward`.

Randomness comes from :class:`RngStream`, a thin wrapper over numpy's Philox
counter-based generator. A stream is addressed by ``(seed, stream_id, counter)``;
every draw consumes exactly one counter value, so any draw can be replayed from
its address alone.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node",
    "ContractError",
    "param",
    "constant",
    "forward_backward",
    "stop_gradient",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "leaky_relu",
    "softplus",
    "square",
    "bce_with_logits",
    "total",
    "mean",
    "gather_rows",
    "RngStream",
    "draw_uniform",
    "draw_normal",
    "draw_choice",
]


class ContractError(ValueError):
    """Raised when a primitive is called outside its documented contract."""


class Node:
    """One value in a differentiable computation graph.

    Parameters
    ----------
    value : ndarray
        The forward value.
    parents : sequence of Node
        Inputs the value was computed from.
    vjp : callable, optional
        Maps the upstream gradient (shape of ``value``) to a tuple with one
        gradient per parent (``None`` for a parent that receives nothing).
    is_param : bool
        Leaves flagged as parameters get an entry in the gradient map.
    name : str, optional
        Label used in error messages and diagnostics.
    """

    __slots__ = ("value", "parents", "vjp", "is_param", "name", "needs_grad", "_order")

    _ids = itertools.count()

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        vjp: Callable | None = None,
        is_param: bool = False,
        name: str | None = None,
    ):
        self.value = np.asarray(value)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.is_param = is_param
        self.name = name
        self.needs_grad = is_param or (vjp is not None and any(p.needs_grad for p in self.parents))
        # Construction order doubles as a topological order.
        self._order = next(Node._ids)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        kind = "param" if self.is_param else "node"
        return f"<{kind}{label} shape={self.shape} dtype={self.value.dtype}>"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def param(value, name: str | None = None) -> Node:
    """Leaf whose gradient is reported by :func:`forward_backward`."""
    return Node(np.asarray(value), is_param=True, name=name)


def constant(value) -> Node:
    return Node(np.asarray(value))


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _pair(a, b) -> tuple[Node, Node]:
    """Promote operands to nodes; bare scalars take the other operand's dtype."""
    if isinstance(a, Node) and not isinstance(b, Node) and np.ndim(b) == 0:
        b = constant(np.asarray(b, dtype=a.value.dtype))
    elif isinstance(b, Node) and not isinstance(a, Node) and np.ndim(a) == 0:
        a = constant(np.asarray(a, dtype=b.value.dtype))
    return _as_node(a), _as_node(b)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def forward_backward(root: Node) -> dict[Node, np.ndarray]:
    """Gradient of a scalar ``root`` with respect to every parameter leaf below it.

    Nodes are visited in reverse construction order, which is a valid reverse
    topological order and keeps accumulation order fixed between calls.
    """
    if root.value.size != 1:
        raise ContractError(f"root must be scalar, got shape {root.shape}")

    seen = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    nodes = sorted(seen.values(), key=lambda n: n._order, reverse=True)

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    out: dict[Node, np.ndarray] = {}
    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_param:
            out[node] = g
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.needs_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    # Parameters reachable only through blocked paths get explicit zeros.
    for node in nodes:
        if node.is_param and node not in out:
            out[node] = np.zeros_like(node.value)
    return out


# --- primitives -------------------------------------------------------------


def stop_gradient(x) -> Node:
    """Identity in the forward pass; passes no gradient back."""
    x = _as_node(x)
    node = Node(x.value, (x,), lambda g: (None,))
    node.needs_grad = False
    return node


def add(a, b) -> Node:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Node:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Node:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    return Node(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def neg(a) -> Node:
    a = _as_node(a)
    return Node(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Node:
    """Matrix product of a ``(n, k)`` and a ``(k, m)`` node."""
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ContractError(f"matmul shapes {av.shape} and {bv.shape} do not chain")
    ga, gb = a.needs_grad, b.needs_grad
    return Node(
        av @ bv,
        (a, b),
        lambda g: (g @ bv.T if ga else None, av.T @ g if gb else None),
    )


def leaky_relu(a, slope: float = 0.3) -> Node:
    a = _as_node(a)
    av = a.value
    t = av.dtype.type
    # branch-free mask: np.where is several times slower on mixed signs
    scale = (av > 0).astype(av.dtype)
    scale *= t(1 - slope)
    scale += t(slope)
    return Node(av * scale, (a,), lambda g: (g * scale,))


def softplus(a) -> Node:
    """``log(1 + exp(a))`` in the overflow-free form."""
    a = _as_node(a)
    av = a.value
    value = np.maximum(av, 0) + np.log1p(np.exp(-np.abs(av)))
    # logistic sigmoid, also overflow-free
    sig = _sigmoid_from(av, np.exp(-np.abs(av)))
    return Node(value, (a,), lambda g: (g * sig,))


def _sigmoid_from(a: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Logistic sigmoid of ``a`` given ``e = exp(-|a|)``, without overflow or branches."""
    t = a.dtype.type
    r = t(1) / (t(1) + e)  # sigmoid(|a|)
    return t(0.5) + np.sign(a) * (r - t(0.5))


def bce_with_logits(logits, targets) -> Node:
    """Mean of ``softplus(l) - x * l`` (binary cross-entropy on raw logits).

    Fused so the gradient's sigmoid reuses the forward ``exp(-|l|)``.
    """
    logits = _as_node(logits)
    lv = logits.value
    x = np.asarray(targets, dtype=lv.dtype)
    if x.shape != lv.shape:
        raise ContractError(f"shape mismatch {lv.shape} vs {x.shape}")
    e = np.exp(-np.abs(lv))
    per = np.maximum(lv, 0)
    per -= x * lv
    per += np.log1p(e)
    t = lv.dtype.type
    n = lv.size

    def vjp(g):
        d = _sigmoid_from(lv, e)
        d -= x
        d *= g / t(n)
        return (d,)

    return Node(np.asarray(per.mean(dtype=np.float64) , dtype=lv.dtype), (logits,), vjp)


def square(a) -> Node:
    a = _as_node(a)
    av = a.value
    return Node(av * av, (a,), lambda g: (2 * av * g,))


def total(a, axis=None) -> Node:
    """Sum over ``axis`` (all axes by default)."""
    a = _as_node(a)
    shape = a.shape
    value = a.value.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(value, (a,), vjp)


def mean(a, axis=None) -> Node:
    a = _as_node(a)
    count = a.value.size if axis is None else a.shape[axis]
    return mul(total(a, axis), np.asarray(1.0 / count, dtype=a.value.dtype))


def gather_rows(table, rows: np.ndarray, cols: np.ndarray) -> Node:
    """Pick ``table[rows, cols]`` elementwise; gradients scatter-add back."""
    table = _as_node(table)
    shape = table.shape
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    rows, cols = np.broadcast_arrays(rows, cols)

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return Node(table.value[rows, cols], (table,), vjp)


# --- randomness -------------------------------------------------------------


@dataclass
class RngStream:
    """Addressable pseudorandom stream.

    Each draw builds a Philox-4x64 generator keyed by ``(seed, stream_id)``
    with the draw counter in the most significant counter word, then advances
    ``counter`` by one. Two streams with different ids never share a key, and
    successive draws on one stream are separated by 2**192 Philox blocks.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        ctr = np.array([0, 0, 0, self.counter], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(counter=ctr, key=key))

    def uniform(self, shape) -> np.ndarray:
        return self._generator().random(shape)

    def normal(self, shape) -> np.ndarray:
        return self._generator().standard_normal(shape)

    def choice(self, n: int, count: int, replace: bool = True) -> np.ndarray:
        if n <= 0:
            raise ContractError(f"choice needs n > 0, got {n}")
        return self._generator().choice(n, size=count, replace=replace)

    def spawn(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id, 0)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "stream_id": self.stream_id, "counter": self.counter}


def draw_uniform(rng: RngStream, shape) -> np.ndarray:
    """Uniform draws on ``[0, 1)``."""
    return rng.uniform(shape)


def draw_normal(rng: RngStream, shape) -> np.ndarray:
    return rng.normal(shape)


def draw_choice(rng: RngStream, n: int, count: int, replace: bool = True) -> np.ndarray:
    """``count`` integers in ``[0, n)``; a permutation slice when ``replace`` is off."""
    return rng.choice(n, count, replace)
