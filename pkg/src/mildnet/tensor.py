"""
Dense tensor with reverse-mode gradients.

A :class:`Tensor` wraps a NumPy array (float32 by default; float64 is kept
when given, which the finite-difference oracles rely on). Differentiable
operations live in :mod:`mildnet.ops`; each one produces a new tensor that
remembers its parents and a closure mapping the output gradient onto the
parents' gradients. :func:`backward` walks that graph in reverse
topological order.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GraphError, NumericError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _as_float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    """N-dimensional float array participating in a gradient graph.

    Image data uses the (batch, channel, height, width) layout. Only leaf
    tensors with ``requires_grad`` keep a ``grad`` buffer after
    :func:`backward`; repeated calls accumulate into it until
    :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _as_float_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # scalar arithmetic is all the loss bookkeeping needs
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.scale(self, other)

    __rmul__ = __mul__


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
    op_name: str,
) -> Tensor:
    """Wrap the output of a forward op, wiring it into the graph.

    Raises :class:`NumericError` when ``data`` is not finite.
    """
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op_name}")
    out = Tensor(data, name=op_name)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological_order(root: Tensor) -> list:
    # iterative DFS; GRAY marks nodes on the current path so a back-edge is a cycle
    WHITE, GRAY, BLACK = 0, 1, 2
    state: dict = {}
    order: list = []
    stack = [(root, iter(root._parents))]
    state[id(root)] = GRAY
    while stack:
        node, children = stack[-1]
        advanced = False
        for child in children:
            if not child.requires_grad:
                continue
            s = state.get(id(child), WHITE)
            if s == GRAY:
                raise GraphError("cycle detected in autodiff graph")
            if s == WHITE:
                state[id(child)] = GRAY
                stack.append((child, iter(child._parents)))
                advanced = True
                break
        if not advanced:
            state[id(node)] = BLACK
            order.append(node)
            stack.pop()
    order.reverse()
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.size != 1:
        raise GraphError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in order:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = g.astype(node.data.dtype, copy=True)
            else:
                node.grad = node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if not np.isfinite(pg).all():
                raise NumericError(f"non-finite gradient flowing out of {node.name}")
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
