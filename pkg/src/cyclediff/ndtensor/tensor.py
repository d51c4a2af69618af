"""Tensor value type and the gradient tape that records operations on it.

A :class:`Tensor` is an immutable n-dimensional array (row-major, float32 by
default) plus an optional handle into the active :class:`GradientTape`.
Operations performed while a tape is active, and which touch at least one
tracked tensor, are appended to the tape in execution order, so the tape is
always topologically sorted.  ``tape.backward(loss)`` walks it in reverse once.

Broadcast rule (deliberately narrower than numpy): both operands of a binary
op must have the same rank, and on every axis the extents are either equal or
one of them is 1.  Python scalars are promoted to an all-ones shape of the
other operand's rank.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with.

    Only the gradient checker uses float64; everything else stays float32.
    """
    old = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> "GradientTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on the current thread."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable n-d array with an optional gradient-tape handle."""

    __slots__ = ("data", "requires_grad", "grad_node", "_tape", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=default_dtype(), copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad_node: int | None = None
        self._tape: GradientTape | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Skip the defensive copy for freshly computed buffers.
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.grad_node = None
        t._tape = None
        t.name = None
        return t

    @classmethod
    def zeros(cls, shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=default_dtype()), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(tuple(shape), dtype=default_dtype()), requires_grad=requires_grad)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    # -- metadata ---------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tracked(self, tape: "GradientTape | None" = None) -> bool:
        tape = tape or active_tape()
        if tape is None:
            return False
        return self.requires_grad or (self.grad_node is not None and self._tape is tape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar (implementations live in ops) ---------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __pow__(self, p):
        from . import ops
        return ops.pow(self, p)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


# backward(grad_out, needs) -> one gradient (or None) per parent; ``needs[i]``
# says whether parent i wants a gradient at all.
BackwardFn = Callable[[np.ndarray, tuple], Sequence["np.ndarray | None"]]


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple, backward: BackwardFn):
        self.out = out
        self.parents = parents
        self.backward = backward


class Gradients:
    """Mapping from tracked leaf tensors to their gradient arrays.

    Leaves that the loss does not depend on read back as zeros.
    """

    def __init__(self, grads: dict[int, tuple[Tensor, np.ndarray]]):
        self._grads = grads

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        hit = self._grads.get(id(leaf))
        if hit is None:
            return np.zeros(leaf.shape, dtype=leaf.data.dtype)
        return hit[1]

    def __contains__(self, leaf: Tensor) -> bool:
        return id(leaf) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def for_params(self, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
        return {k: self[v] for k, v in params.items()}


class GradientTape:
    """Records differentiable operations for one reverse pass.

    Use as a context manager; ``backward`` may be called once per recording.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "GradientTape":
        if self.consumed:
            raise TapeError("tape already consumed; record a new one")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        elif self in stack:
            stack.remove(self)

    def record(self, out: Tensor, parents: tuple, backward: BackwardFn) -> None:
        out.grad_node = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss: Tensor) -> Gradients:
        if self.consumed:
            raise TapeError("backward called twice on the same recording")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.grad_node is None or loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        self.consumed = True

        node_grads: dict[int, np.ndarray] = {loss.grad_node: np.ones(loss.shape, dtype=loss.data.dtype)}
        leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}

        for idx in range(loss.grad_node, -1, -1):
            g = node_grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            needs = tuple(isinstance(p, Tensor) and (p.requires_grad or (p.grad_node is not None and p._tape is self))
                          for p in node.parents)
            parent_grads = node.backward(g, needs)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not isinstance(parent, Tensor):
                    continue
                if parent.grad_node is not None and parent._tape is self:
                    prev = node_grads.get(parent.grad_node)
                    node_grads[parent.grad_node] = pg if prev is None else prev + pg
                elif parent.requires_grad:
                    prev = leaf_grads.get(id(parent))
                    leaf_grads[id(parent)] = (parent, pg if prev is None else prev[1] + pg)
        self.nodes = []
        return Gradients(leaf_grads)


def record(out_data: np.ndarray, parents: tuple, backward: BackwardFn) -> Tensor:
    """Wrap a forward result and put it on the active tape if any parent is tracked."""
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None and any(isinstance(p, Tensor) and p.tracked(tape) for p in parents):
        tape.record(out, parents, backward)
    return out
