"""Tensor type and the reverse-mode sweep.

Each non-leaf tensor remembers the primitive that produced it (``op``), its
input tensors and whatever context the primitive saved for its backward rule.
Backward rules live in :data:`BACKWARD_RULES`, keyed by primitive id, and are
looked up at backward time.
"""
from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import NumericError, StateError, ValidationError

BackwardRule = Callable[[object, np.ndarray], Sequence[Optional[np.ndarray]]]

#: primitive id -> backward rule ``(ctx, grad_out) -> grads per input``
BACKWARD_RULES: Dict[str, BackwardRule] = {}

_state = {
    "grad_enabled": True,
    "debug": os.environ.get("GEOGAN_DEBUG", "") not in ("", "0"),
    "kink_recorder": None,
}


def register(op: str):
    def deco(fn: BackwardRule) -> BackwardRule:
        BACKWARD_RULES[op] = fn
        return fn

    return deco


def set_debug(flag: bool) -> None:
    """Toggle finiteness checks after every primitive."""
    _state["debug"] = bool(flag)


def is_debug() -> bool:
    return _state["debug"]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def record_kinks() -> Iterator[List[np.ndarray]]:
    """Collect the inputs of every piecewise-linear primitive evaluated inside."""
    prev = _state["kink_recorder"]
    log: List[np.ndarray] = []
    _state["kink_recorder"] = log
    try:
        yield log
    finally:
        _state["kink_recorder"] = prev


def note_kink_input(values: np.ndarray) -> None:
    log = _state["kink_recorder"]
    if log is not None:
        log.append(np.array(values, copy=True))


class Tensor:
    """Dense N-d array that can take part in a differentiable computation."""

    __slots__ = ("data", "requires_grad", "grad", "op", "inputs", "ctx", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op: Optional[str] = None
        self.inputs: Tuple["Tensor", ...] = ()
        self.ctx = None
        self.name = name

    # -- array-ish surface -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; the primitives live in functional.py
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

        if np.isscalar(other):
            return F.scale(self, float(other))
        return F.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        from . import functional as F

        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return F.scale(self, 1.0 / float(other))

    def __neg__(self):
        from . import functional as F

        return F.scale(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F

        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, op: str, inputs: Sequence[Tensor], ctx=None) -> Tensor:
    """Wrap a primitive's output, attaching graph links when gradients are live."""
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from primitive {op!r}")
    out = Tensor(data)
    if _state["grad_enabled"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = op
        out.inputs = tuple(inputs)
        out.ctx = ctx
    return out


@dataclass
class Graph:
    """Topologically ordered view of the nodes feeding one output tensor."""

    output: Tensor
    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(output=output, nodes=order)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if grad is None and loss.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise StateError("loss does not depend on any tensor that requires grad")

    graph = Graph.trace(loss)
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    grads: Dict[int, np.ndarray] = {id(loss): seed}

    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        rule = BACKWARD_RULES[node.op]
        in_grads = rule(node.ctx, g)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if _state["debug"] and not np.all(np.isfinite(pg)):
                raise NumericError(f"non-finite gradient in backward of {node.op!r}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
