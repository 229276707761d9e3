"""Tape-based reverse-mode differentiation over numpy arrays.

Every op builds a fresh :class:`Tensor` that remembers its parents and a
vector-Jacobian product (``vjp``) closure.  The tape is rebuilt on every
forward pass, which keeps per-sample gradients trivial: run the forward on a
single sample and call :func:`backward`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A node of the differentiation graph.

    Leaves are created directly; interior nodes come from :func:`make_node`.
    """

    __slots__ = ("data", "requires_grad", "parents", "vjp", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype}{flag})"

    # Arithmetic sugar; implementations live in ``ops``.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_node(value: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Wrap ``value`` as the output of ``op``; records the tape entry only if needed."""
    out = Tensor(value)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
    return out


class GraphError(RuntimeError):
    pass


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; grey marks catch cycles
    order: list[Tensor] = []
    state: dict[int, int] = {}
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, idx = stack.pop()
        key = id(node)
        if idx == 0:
            mark = state.get(key)
            if mark == 2:
                continue
            if mark == 1:
                raise GraphError("cycle detected in differentiation graph")
            state[key] = 1
        if idx < len(node.parents):
            stack.append((node, idx + 1))
            parent = node.parents[idx]
            if parent.requires_grad:
                pstate = state.get(id(parent))
                if pstate == 1:
                    raise GraphError("cycle detected in differentiation graph")
                if pstate is None:
                    stack.append((parent, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def backward(root: Tensor, seed=None) -> dict[Tensor, np.ndarray]:
    """Propagate ``seed`` from ``root`` back to every leaf that requires grad.

    Returns a map from leaf tensor to its cotangent.  ``seed`` defaults to
    ones shaped like the root.
    """
    if seed is None:
        seed = np.ones_like(root.data)
    seed = np.asarray(seed, dtype=root.data.dtype)
    if seed.shape != root.shape:
        raise ValueError(f"seed cotangent shape {seed.shape} != root shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): seed}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            continue
        cotangents = node.vjp(g)
        for parent, ct in zip(node.parents, cotangents):
            if ct is None or not parent.requires_grad:
                continue
            if ct.shape != parent.shape:
                raise ValueError(
                    f"shape mismatch in VJP of {node.op}: got {ct.shape}, expected {parent.shape}"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + ct
            else:
                grads[key] = ct
    return leaves
