"""Reverse-mode differentiation over a dynamic tape of numpy values.

A `Node` wraps one array plus the recipe for pushing gradients to its
parents. Graphs are built define-by-run (each training step re-records,
so per-step noise draws land on the tape naturally) and `grad` walks the
tape in exact reverse topological order, summing a node's gradient over
all consumers before its own backward fires.

Custom forward/backward pairs (`CustomRule`, `apply_custom`) are first
class: quantization uses them for the straight-through estimator and
noise injection uses them for forward-only perturbations.

Conventions fixed here: ReLU subgradient at 0 is 0; max-pool ties route
the gradient to the first maximal element in window scan order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from quantnoise import kernels
from quantnoise.errors import ShapeError

__all__ = [
    "Node", "CustomRule", "leaf", "grad", "apply_custom",
    "add", "mul", "scale", "matmul", "add_bias", "conv2d", "relu",
    "maxpool", "avgpool", "flatten", "subsample2", "dropout",
    "softmax", "sum_all", "mean_all", "cross_entropy",
]


class Node:
    """One tape entry: a value, its parents, and a vector-Jacobian product.

    `vjp(upstream)` returns one gradient array per parent (None for
    parents that need no gradient).
    """

    __slots__ = ("value", "parents", "vjp")

    def __init__(self, value: np.ndarray, parents: tuple = (),
                 vjp: Callable | None = None):
        self.value = value
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype


def leaf(value: np.ndarray) -> Node:
    """A parameter or input node."""
    return Node(np.asarray(value))


def _topo_order(root: Node) -> list[Node]:
    """Iterative post-order: children before consumers."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
    """d(loss)/d(node) for each node in `wrt`.

    Loss must be scalar. Parameters not reachable from the loss get zero
    gradients of their own shape.
    """
    if loss.value.size != 1:
        raise ShapeError(f"grad needs a scalar loss, got shape {loss.value.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.value)
    }
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if pg.shape != p.value.shape:
                raise ShapeError(
                    f"backward produced gradient of shape {pg.shape} for "
                    f"input of shape {p.value.shape}")
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(np.zeros_like(w.value) if g is None else g)
    return out


@dataclass(frozen=True)
class CustomRule:
    """A forward function paired with a hand-written backward.

    forward(*values) -> value
    backward(upstream, inputs, output) -> tuple of per-input gradients
    The backward is used verbatim; it is never differentiated through.
    """
    forward: Callable
    backward: Callable


def apply_custom(rule: CustomRule, *inputs: Node) -> Node:
    values = tuple(n.value for n in inputs)
    out = rule.forward(*values)

    def vjp(upstream):
        gs = rule.backward(upstream, values, out)
        if len(gs) != len(inputs):
            raise ShapeError(
                f"custom backward returned {len(gs)} gradients for "
                f"{len(inputs)} inputs")
        return gs

    return Node(np.asarray(out), inputs, vjp)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    v = kernels.add(a.value, b.value)
    return Node(v, (a, b), lambda up: (up, up))


def mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    v = kernels.mul(av, bv)
    return Node(v, (a, b), lambda up: (kernels.mul(up, bv), kernels.mul(up, av)))


def scale(a: Node, c: float) -> Node:
    v = kernels.mul(a.value, c)
    return Node(v, (a,), lambda up: (kernels.mul(up, c),))


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    v = kernels.matmul(av, bv)

    def vjp(up):
        da = kernels.matmul(up, np.ascontiguousarray(bv.T))
        db = kernels.matmul(np.ascontiguousarray(av.T), up)
        return da, db

    return Node(v, (a, b), vjp)


def add_bias(x: Node, b: Node) -> Node:
    v = kernels.add_bias(x.value, b.value)

    def vjp(up):
        return up, kernels.reduce_sum(up, 0)

    return Node(v, (x, b), vjp)


def conv2d(x: Node, w: Node, stride: int = 1, padding: int = 0) -> Node:
    xv, wv = x.value, w.value
    v = kernels.conv2d(xv, wv, stride, padding)

    def vjp(up):
        return kernels.conv2d_backward(xv, wv, up, stride, padding)

    return Node(v, (x, w), vjp)


def relu(x: Node) -> Node:
    xv = x.value
    v = kernels.relu(xv)
    mask = (xv > 0).astype(xv.dtype)  # subgradient at 0 is 0

    def vjp(up):
        return (kernels.mul(up, mask),)

    return Node(v, (x,), vjp)


def maxpool(x: Node, kernel: int = 2, stride: int | None = None,
            padding: int = 0) -> Node:
    xv = x.value
    v, sel = kernels.maxpool(xv, kernel, stride, padding)

    def vjp(up):
        return (kernels.maxpool_backward(xv.shape, sel, up, kernel, stride, padding),)

    return Node(v, (x,), vjp)


def avgpool(x: Node, output_size: tuple[int, int]) -> Node:
    xv = x.value
    v = kernels.avgpool(xv, output_size)

    def vjp(up):
        return (kernels.avgpool_backward(xv.shape, output_size, up),)

    return Node(v, (x,), vjp)


def flatten(x: Node) -> Node:
    xv = x.value
    v = kernels.flatten(xv)

    def vjp(up):
        return (np.ascontiguousarray(up.reshape(xv.shape)),)

    return Node(v, (x,), vjp)


def subsample2(x: Node) -> Node:
    xv = x.value
    v = kernels.subsample2(xv)

    def vjp(up):
        dx = np.zeros_like(xv)
        dx[:, :, ::2, ::2] = up
        return (dx,)

    return Node(v, (x,), vjp)


def dropout(x: Node, p: float, stream) -> Node:
    """Inverted dropout with a deterministic mask from `stream`.

    Training-mode only; eval paths simply skip the op.
    """
    xv = x.value
    keep = (stream.uniform(xv.shape) >= p).astype(xv.dtype)
    factor = xv.dtype.type(1.0 / (1.0 - p))
    mask = keep * factor

    def vjp(up):
        return (kernels.mul(up, mask),)

    return Node(kernels.mul(xv, mask), (x,), vjp)


def softmax(x: Node) -> Node:
    s = kernels.softmax_rows(x.value)

    def vjp(up):
        dot = np.sum(up.astype(np.float64) * s.astype(np.float64),
                     axis=1, keepdims=True)
        return ((s.astype(np.float64) * (up.astype(np.float64) - dot))
                .astype(up.dtype),)

    return Node(s, (x,), vjp)


def sum_all(x: Node) -> Node:
    xv = x.value
    v = kernels.reduce_sum_all(xv)

    def vjp(up):
        return (np.full_like(xv, up),)

    return Node(v, (x,), vjp)


def mean_all(x: Node) -> Node:
    xv = x.value
    v = kernels.reduce_mean_all(xv)

    def vjp(up):
        return (np.full_like(xv, up / xv.size),)

    return Node(v, (x,), vjp)


def cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    """Mean over the batch of -log softmax(logits)[label].

    Stabilized with row-max subtraction; the softmax/one-hot backward is
    exact and divides by the true batch size.
    """
    lv = logits.value
    if lv.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {lv.shape}")
    if labels.shape != (lv.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {lv.shape[0]}")
    m = lv.shape[0]
    x64 = lv.astype(np.float64)
    mx = np.max(x64, axis=1, keepdims=True)
    e = np.exp(x64 - mx)
    denom = np.sum(e, axis=1)
    logp = (x64 - mx)[np.arange(m), labels] - np.log(denom)
    loss = np.asarray(-np.mean(logp), dtype=lv.dtype)
    soft = e / denom[:, None]

    def vjp(up):
        g = soft.copy()
        g[np.arange(m), labels] -= 1.0
        g *= float(up) / m
        return (g.astype(lv.dtype),)

    return Node(loss, (logits,), vjp)
