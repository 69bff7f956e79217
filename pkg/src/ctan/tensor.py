"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass.  Applying one
to tensors that require gradients records a :class:`Node`; nodes carry a
monotonically increasing sequence number, so the set of nodes reachable from
a loss, sorted by that number, is exactly the tape in recording order.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Any, Iterator, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_sequence = itertools.count()
_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when a tensor would hold NaN or Inf."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording inside the block (evaluation, optimizer updates)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """An n-dimensional array of reals that can take part in differentiation.

    ``data`` is a contiguous numpy array; integer and boolean inputs are
    promoted to the default float dtype.  Non-finite values are rejected.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        arr = np.ascontiguousarray(arr)
        if arr.size == 0:
            raise ValueError("empty tensors are not supported")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor{' ' + name if name else ''}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the named functions in ctan.ops are the real API
    def __add__(self, other: "Tensor") -> "Tensor":
        from ctan.ops import add

        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from ctan.ops import broadcast_mul

        if other.size <= self.size:
            return broadcast_mul(other, self)
        return broadcast_mul(self, other)

    def __neg__(self) -> "Tensor":
        from ctan.ops import scale

        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        from ctan.ops import sum_all

        return sum_all(self)


class Node:
    """One recorded operation: inputs, the function and its saved context."""

    __slots__ = ("seq", "fn", "ctx", "inputs", "__weakref__")

    def __init__(self, fn: type["Function"], ctx: dict, inputs: Sequence[Tensor]):
        self.seq = next(_sequence)
        self.fn = fn
        self.ctx = ctx
        self.inputs = tuple(inputs)


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward(ctx, *arrays, **kw) -> array`` and
    ``backward(ctx, grad) -> tuple`` with one entry per tensor input (``None``
    where no gradient flows).  Both are static so tests can swap a rule out.
    """

    @staticmethod
    def forward(ctx: dict, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    @staticmethod
    def backward(ctx: dict, grad: np.ndarray) -> tuple:  # pragma: no cover
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        ctx: dict = {}
        out_data = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        track = grad_enabled() and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=track, dtype=out_data.dtype)
        if track:
            out._node = Node(cls, ctx, tensors)
        return out


class Tape:
    """The recorded operations reachable from one output, in recording order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        if out._node is None:
            raise ValueError("tensor is detached from the tape (no recorded operation produced it)")
        seen: dict[int, Node] = {}
        stack = [out._node]
        while stack:
            node = stack.pop()
            if node.seq in seen:
                continue
            seen[node.seq] = node
            for t in node.inputs:
                if t._node is not None and t._node.seq not in seen:
                    stack.append(t._node)
        return cls([seen[k] for k in sorted(seen)])

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Gradients from multiple uses of a tensor accumulate; leaf ``.grad``
    buffers are added to, not overwritten.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    pending: dict[int, np.ndarray] = {loss._node.seq: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        grad = pending.pop(node.seq, None)
        if grad is None:
            continue
        input_grads = node.fn.backward(node.ctx, grad)
        for t, g in zip(node.inputs, input_grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.shape:
                raise RuntimeError(f"{node.fn.__name__}.backward produced shape {g.shape} for input {t.shape}")
            if t._node is not None:
                key = t._node.seq
                pending[key] = pending[key] + g if key in pending else g
            else:
                t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g


def as_tensor(x: Any, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
