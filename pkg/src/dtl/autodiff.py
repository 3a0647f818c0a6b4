"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive registers its vector-Jacobian product in terms of the same
primitive set, so the result of :func:`grad` with ``build_graph=True`` is an
ordinary differentiable graph. That closure is what makes Hessian-vector
products by backward-on-backward possible.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

from dtl.errors import ContractError, ShapeError

__all__ = [
    "Node", "leaf", "constant", "detach", "no_grad", "grad", "hvp", "hvp_from_grads",
    "flatten", "split_flat", "counters",
    "matmul", "transpose", "add", "sub", "neg", "mul", "scale", "add_bias",
    "sum_rows", "broadcast_rows", "row_sum", "broadcast_cols", "relu", "exp", "log",
    "log_softmax", "gather", "scatter", "mean", "sum", "expand", "vdot",
    "mul_scalar", "div", "sqrt", "reshape",
]

_ids = itertools.count()
_mode = threading.local()


def _grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    prev = _grad_enabled()
    _mode.enabled = enabled
    try:
        yield
    finally:
        _mode.enabled = prev


def no_grad():
    """Context manager under which new nodes record no parents."""
    return _grad_mode(False)


class OpCounters:
    """Thread-safe tallies of forward passes, reverse sweeps and HVPs."""

    _fields = ("forward", "reverse", "hvp", "pair_sweeps")

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self):
        with self._lock:
            for f in self._fields:
                setattr(self, f, 0)

    def bump(self, field: str, n: int = 1):
        with self._lock:
            setattr(self, field, getattr(self, field) + n)

    def snapshot(self) -> dict:
        with self._lock:
            return {f: getattr(self, f) for f in self._fields}


counters = OpCounters()


class Node:
    """A dense float64 array plus the edges needed to differentiate it.

    ``edges`` holds ``(parent, vjp)`` pairs, one per parent that requires a
    gradient; ``vjp`` maps the upstream gradient Node to this parent's share.
    Nodes are never mutated after construction.
    """

    __slots__ = ("value", "edges", "requires_grad", "id", "op", "__weakref__")

    def __init__(self, value, edges=(), requires_grad=False, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.edges = tuple(edges)
        self.requires_grad = requires_grad
        self.op = op
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return not self.edges

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    def __radd__(self, other):
        return add(_lift(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.shape))

    def __rsub__(self, other):
        return sub(_lift(other, self.shape), self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        if isinstance(other, Node) and other.shape == () and self.shape != ():
            return mul_scalar(self, other)
        return mul(self, _lift(other, self.shape))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, _lift(other, self.shape))

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, shape) -> Node:
    if isinstance(x, Node):
        return x
    return constant(np.broadcast_to(np.asarray(x, dtype=np.float64), shape).copy())


def _derived(value, op: str, edges: Iterable[tuple]) -> Node:
    if _grad_enabled():
        edges = tuple((p, fn) for p, fn in edges if p.requires_grad)
    else:
        edges = ()
    return Node(value, edges, requires_grad=bool(edges), op=op)


def leaf(value, requires_grad: bool = True) -> Node:
    return Node(value, requires_grad=requires_grad)


def constant(value) -> Node:
    return Node(value, requires_grad=False, op="const")


def detach(node: Node) -> Node:
    """Same values, no history: gradients stop here."""
    return Node(node.value, requires_grad=False, op="detach")


def _check_same(a: Node, b: Node, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- primitives ---------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _derived(a.value @ b.value, "matmul", (
        (a, lambda g: matmul(g, transpose(b))),
        (b, lambda g: matmul(transpose(a), g)),
    ))


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    return _derived(a.value.T, "transpose", ((a, transpose),))


def add(a: Node, b: Node) -> Node:
    _check_same(a, b, "add")
    return _derived(a.value + b.value, "add", ((a, lambda g: g), (b, lambda g: g)))


def sub(a: Node, b: Node) -> Node:
    _check_same(a, b, "sub")
    return _derived(a.value - b.value, "sub", ((a, lambda g: g), (b, neg)))


def neg(a: Node) -> Node:
    return _derived(-a.value, "neg", ((a, neg),))


def mul(a: Node, b: Node) -> Node:
    _check_same(a, b, "mul")
    return _derived(a.value * b.value, "mul", (
        (a, lambda g: mul(g, b)),
        (b, lambda g: mul(g, a)),
    ))


def scale(a: Node, c: float) -> Node:
    """Multiply by a Python constant."""
    return _derived(a.value * c, "scale", ((a, lambda g: scale(g, c)),))


def add_bias(x: Node, b: Node) -> Node:
    """Row-broadcast add: ``x`` is (n, k), ``b`` is (k,)."""
    if x.value.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: cannot add {b.shape} to rows of {x.shape}")
    return _derived(x.value + b.value, "add_bias", (
        (x, lambda g: g),
        (b, sum_rows),
    ))


def sum_rows(x: Node) -> Node:
    """(n, k) -> (k,), summing over the batch axis."""
    if x.value.ndim != 2:
        raise ShapeError(f"sum_rows: expected 2-D, got {x.shape}")
    n = x.shape[0]
    return _derived(x.value.sum(axis=0), "sum_rows", ((x, lambda g: broadcast_rows(g, n)),))


def broadcast_rows(v: Node, n: int) -> Node:
    """(k,) -> (n, k)."""
    if v.value.ndim != 1:
        raise ShapeError(f"broadcast_rows: expected 1-D, got {v.shape}")
    return _derived(np.broadcast_to(v.value, (n, v.shape[0])).copy(), "broadcast_rows",
                    ((v, sum_rows),))


def row_sum(x: Node) -> Node:
    """(n, k) -> (n,), summing within each row."""
    if x.value.ndim != 2:
        raise ShapeError(f"row_sum: expected 2-D, got {x.shape}")
    k = x.shape[1]
    return _derived(x.value.sum(axis=1), "row_sum", ((x, lambda g: broadcast_cols(g, k)),))


def broadcast_cols(v: Node, k: int) -> Node:
    """(n,) -> (n, k)."""
    if v.value.ndim != 1:
        raise ShapeError(f"broadcast_cols: expected 1-D, got {v.shape}")
    return _derived(np.repeat(v.value[:, None], k, axis=1), "broadcast_cols", ((v, row_sum),))


def relu(x: Node) -> Node:
    mask = constant((x.value > 0).astype(np.float64))
    return _derived(x.value * mask.value, "relu", ((x, lambda g: mul(g, mask)),))


def exp(x: Node) -> Node:
    out = _derived(np.exp(x.value), "exp", ())
    if _grad_enabled() and x.requires_grad:
        out.edges = ((x, lambda g: mul(g, out)),)
        out.requires_grad = True
    return out


def log(x: Node) -> Node:
    return _derived(np.log(x.value), "log", ((x, lambda g: div(g, x)),))


def log_softmax(x: Node) -> Node:
    """Row-wise log-softmax of an (n, k) array."""
    if x.value.ndim != 2:
        raise ShapeError(f"log_softmax: expected 2-D, got {x.shape}")
    z = x.value - x.value.max(axis=1, keepdims=True)
    value = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    k = x.shape[1]
    out = _derived(value, "log_softmax", ())
    if _grad_enabled() and x.requires_grad:
        def vjp(g):
            return sub(g, mul(exp(out), broadcast_cols(row_sum(g), k)))
        out.edges = ((x, vjp),)
        out.requires_grad = True
    return out


def _check_index(x_shape, idx):
    idx = np.asarray(idx)
    if idx.ndim != 1 or idx.shape[0] != x_shape[0]:
        raise ShapeError(f"index of shape {idx.shape} does not match {x_shape}")
    return idx


def gather(x: Node, idx) -> Node:
    """Pick ``x[i, idx[i]]`` for each row: (n, k) -> (n,)."""
    if x.value.ndim != 2:
        raise ShapeError(f"gather: expected 2-D, got {x.shape}")
    idx = _check_index(x.shape, idx)
    rows = np.arange(x.shape[0])
    k = x.shape[1]
    return _derived(x.value[rows, idx], "gather", ((x, lambda g: scatter(g, idx, k)),))


def scatter(v: Node, idx, k: int) -> Node:
    """Inverse of :func:`gather`: place ``v[i]`` at column ``idx[i]`` of a zero (n, k) array."""
    if v.value.ndim != 1:
        raise ShapeError(f"scatter: expected 1-D, got {v.shape}")
    idx = _check_index(v.shape, idx)
    out = np.zeros((v.shape[0], k))
    out[np.arange(v.shape[0]), idx] = v.value
    return _derived(out, "scatter", ((v, lambda g: gather(g, idx)),))


def sum(x: Node) -> Node:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _derived(x.value.sum(), "sum", ((x, lambda g: expand(g, shape)),))


def mean(x: Node) -> Node:
    shape, n = x.shape, x.size
    return _derived(x.value.mean(), "mean", ((x, lambda g: expand(scale(g, 1.0 / n), shape)),))


def expand(s: Node, shape: tuple) -> Node:
    """Fill an array of ``shape`` with the scalar ``s``."""
    if s.shape != ():
        raise ShapeError(f"expand: expected a scalar, got {s.shape}")
    return _derived(np.full(shape, s.value), "expand", ((s, sum),))


def vdot(a: Node, b: Node) -> Node:
    """Inner product of two same-shape arrays, flattened."""
    _check_same(a, b, "vdot")
    return _derived(np.dot(a.value.ravel(), b.value.ravel()), "vdot", (
        (a, lambda g: mul_scalar(b, g)),
        (b, lambda g: mul_scalar(a, g)),
    ))


def mul_scalar(x: Node, s: Node) -> Node:
    """Array times a differentiable scalar."""
    if s.shape != ():
        raise ShapeError(f"mul_scalar: expected a scalar, got {s.shape}")
    return _derived(x.value * s.value, "mul_scalar", (
        (x, lambda g: mul_scalar(g, s)),
        (s, lambda g: vdot(g, x)),
    ))


def div(a: Node, b: Node) -> Node:
    _check_same(a, b, "div")
    out = _derived(a.value / b.value, "div", ())
    if _grad_enabled() and (a.requires_grad or b.requires_grad):
        out.edges = tuple((p, fn) for p, fn in (
            (a, lambda g: div(g, b)),
            (b, lambda g: neg(div(mul(g, out), b))),
        ) if p.requires_grad)
        out.requires_grad = True
    return out


def sqrt(x: Node) -> Node:
    out = _derived(np.sqrt(x.value), "sqrt", ())
    if _grad_enabled() and x.requires_grad:
        out.edges = ((x, lambda g: div(scale(g, 0.5), out)),)
        out.requires_grad = True
    return out


def reshape(x: Node, shape: tuple) -> Node:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _derived(x.value.reshape(shape), "reshape", ((x, lambda g: reshape(g, old)),))


# -- differentiation ----------------------------------------------------------

def _reverse_order(output: Node) -> list[Node]:
    seen = {output.id: output}
    stack = [output]
    while stack:
        node = stack.pop()
        for parent, _ in node.edges:
            if parent.id not in seen:
                seen[parent.id] = parent
                stack.append(parent)
    # parents are always created before their children
    return [seen[i] for i in sorted(seen, reverse=True)]


def grad(output: Node, wrt: Sequence[Node], build_graph: bool = False) -> list[Node]:
    """Gradient of a scalar ``output`` with respect to each node in ``wrt``.

    Nodes in ``wrt`` that ``output`` does not depend on get explicit zeros.
    With ``build_graph`` the returned nodes carry their own history and can
    be differentiated again.
    """
    if output.shape != ():
        raise ContractError(f"grad: output must be a scalar, got shape {output.shape}")
    for w in wrt:
        if not w.requires_grad:
            raise ContractError("grad: every wrt node must require grad")
    counters.bump("reverse")
    targets = {w.id for w in wrt}
    found: dict[int, Node] = {}
    pending: dict[int, Node] = {output.id: constant(np.ones(()))}
    with _grad_mode(build_graph):
        if output.requires_grad:
            for node in _reverse_order(output):
                g = pending.pop(node.id, None)
                if g is None:
                    continue
                if node.id in targets:
                    found[node.id] = g
                for parent, vjp in node.edges:
                    pg = vjp(g)
                    prev = pending.get(parent.id)
                    pending[parent.id] = pg if prev is None else add(prev, pg)
        elif output.id in targets:
            found[output.id] = pending[output.id]
    return [found[w.id] if w.id in found else constant(np.zeros(w.shape)) for w in wrt]


def flatten(nodes: Sequence[Node]) -> np.ndarray:
    if not nodes:
        return np.zeros(0)
    return np.concatenate([n.value.ravel() for n in nodes])


def split_flat(vec: np.ndarray, shapes: Sequence[tuple]) -> list[np.ndarray]:
    """Cut a flat vector into arrays of the given shapes."""
    vec = np.asarray(vec, dtype=np.float64)
    total = int(np.sum([int(np.prod(s)) for s in shapes]))
    if vec.ndim != 1 or vec.shape[0] != total:
        raise ShapeError(f"flat vector of shape {vec.shape} does not match {total} parameters")
    out, start = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(vec[start:start + n].reshape(s))
        start += n
    return out


def hvp_from_grads(grads: Sequence[Node], params: Sequence[Node], v) -> np.ndarray:
    """Hessian-vector product given gradients built with ``build_graph=True``.

    Differentiates ``<grads, detach(v)>``; ``v`` is a constant so only the
    first factor contributes.
    """
    pieces = split_flat(v, [p.shape for p in params])
    counters.bump("hvp")
    terms = [vdot(g, constant(piece)) for g, piece in zip(grads, pieces) if g.requires_grad]
    if not terms:
        return np.zeros(sum_sizes(params))
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return flatten(grad(total, params))


def hvp(loss: Node, params: Sequence[Node], v) -> np.ndarray:
    """``∇²loss · v`` as a flat vector, by backward-on-backward."""
    split_flat(v, [p.shape for p in params])
    return hvp_from_grads(grad(loss, params, build_graph=True), params, v)


def sum_sizes(nodes: Sequence[Node]) -> int:
    return int(np.sum([n.size for n in nodes])) if nodes else 0

