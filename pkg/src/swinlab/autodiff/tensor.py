"""Tensor type and the reverse-mode tape.

Every differentiable operation produces a :class:`Tensor` carrying a
:class:`Node`. Nodes are stamped with a global, strictly increasing sequence
number at creation, so sorting the reachable nodes by that number recovers the
exact execution order; :meth:`Tensor.backward` walks it in reverse.
"""
from __future__ import annotations

import contextlib
import itertools
import logging
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_SEQ = itertools.count()
_STATE = {"grad_enabled": True, "debug": False}

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class NonFiniteError(FloatingPointError):
    """Raised when a forward result contains NaN or Inf in debug mode."""


class GraphConsumedError(RuntimeError):
    """Raised on a second backward pass through an already-consumed graph."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    prev = _STATE["grad_enabled"]
    _STATE["grad_enabled"] = False
    try:
        yield
    finally:
        _STATE["grad_enabled"] = prev


def is_grad_enabled() -> bool:
    return _STATE["grad_enabled"]


def set_debug(flag: bool) -> None:
    """Toggle finiteness assertions on every forward result."""
    _STATE["debug"] = bool(flag)


def is_debug() -> bool:
    return _STATE["debug"]


class Node:
    """One tape entry: the inputs of an operation and its backward rule."""

    __slots__ = ("seq", "inputs", "backward_fn", "op", "consumed")

    def __init__(self, inputs: Sequence["Tensor"], backward_fn: Callable, op: str):
        self.seq = next(_SEQ)
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.op = op
        self.consumed = False

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, seq={self.seq})"


class Tensor:
    """Dense n-dimensional array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- reverse pass ----------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` of every leaf that requires it.

        Only scalar roots are accepted unless an explicit upstream gradient is
        given. Each graph may be traversed once; its nodes are released
        afterwards.
        """
        if grad is None:
            if self.size != 1:
                raise ValueError(f"backward needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ValueError(f"upstream gradient shape {grad.shape} != {self.shape}")
        if self.node is None:
            if not self.requires_grad:
                raise RuntimeError("tensor does not require grad and has no tape entry")
            _accumulate_leaf(self, grad)
            return
        if self.node.consumed:
            raise GraphConsumedError(
                "graph already consumed by a previous backward; rerun the forward pass"
            )

        # collect reachable nodes
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            order.append(t)
            stack.extend(inp for inp in t.node.inputs if inp.requires_grad)
        order.sort(key=lambda t: t.node.seq, reverse=True)

        grads: dict[int, np.ndarray] = {id(self): grad}
        for t in order:
            g = grads.pop(id(t), None)
            node = t.node
            if node.consumed:
                raise GraphConsumedError(f"node {node} was consumed by an earlier backward")
            if g is not None:
                in_grads = node.backward_fn(g)
                for inp, ig in zip(node.inputs, in_grads):
                    if ig is None or not inp.requires_grad:
                        continue
                    if ig.shape != inp.shape:
                        raise RuntimeError(
                            f"{node.op}: gradient shape {ig.shape} != input shape {inp.shape}"
                        )
                    if inp.node is None:
                        _accumulate_leaf(inp, ig)
                    elif id(inp) in grads:
                        grads[id(inp)] = grads[id(inp)] + ig
                    else:
                        grads[id(inp)] = ig
            node.consumed = True
            node.backward_fn = None

    # -- operator sugar (implemented in functional) -------------------------
    def __add__(self, other):
        from . import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F

        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F

        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F

        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F

        return F.div(other, self)

    def __neg__(self):
        from . import functional as F

        return F.scale(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F

        return F.matmul(self, other)

    def __getitem__(self, index):
        from . import functional as F

        return F.index(self, index)

    def reshape(self, *shape):
        from . import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def permute(self, *axes):
        from . import functional as F

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F

        return F.mean(self, axis=axis, keepdims=keepdims)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad = t.grad + g


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap a forward result, registering it on the tape when needed."""
    if _STATE["debug"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite values in forward result")
    out = Tensor(data)
    if _STATE["grad_enabled"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(inputs, backward_fn, op)
    return out
