"""Dense float64 tensors with a reverse-mode tape.

Every differentiable op records a :class:`Node` on the thread's current
:class:`Tape` when at least one input requires a gradient. :func:`backward`
walks that tape once, in reverse, and accumulates into ``.grad`` of the leaf
tensors. The tape is then marked consumed and a fresh one is installed.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from its inputs."""


class TapeError(RuntimeError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: BackwardFn
    tape: "Tape"


@dataclass(eq=False)
class Tape:
    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def record(self, node: Node) -> None:
        if self.consumed:
            raise TapeError("recording onto a consumed tape")
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def reset_tape() -> Tape:
    """Discard the current tape (and everything recorded on it)."""
    _state.tape = Tape()
    return _state.tape


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __array_priority__ = 1000

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data: np.ndarray = np.array(data, dtype=np.float64, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.name = self.name
        out._node = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar; implementations live in ops ----------------------
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
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap an op's output and record it on the tape if gradients are needed."""
    if not np.isfinite(out).all():
        bad = int(np.size(out) - np.count_nonzero(np.isfinite(out)))
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise NonFiniteError(f"{op}: {bad} non-finite value(s) in output of shape {out.shape} "
                             f"(input shapes: {shapes})")
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.name = None
    result._node = None
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    result.requires_grad = needs
    if needs:
        tape = _state.tape
        node = Node(op, tuple(inputs), result, backward, tape)
        tape.record(node)
        result._node = node
    return result


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor that ``loss`` depends on.

    Gradients accumulate (``+=``) into existing ``.grad`` buffers. The tape
    that produced ``loss`` can only be replayed once.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise TapeError("loss does not depend on any tensor requiring grad")
    tape = node.tape
    if tape.consumed:
        raise TapeError("backward already ran on this tape; run a fresh forward pass first")
    if not tape.nodes:
        raise TapeError("empty tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for n in reversed(tape.nodes):
        g = pending.pop(id(n.output), None)
        if g is None:
            continue
        grads = n.backward(g)
        for parent, pg in zip(n.inputs, grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64, copy=True).reshape(parent.shape)
                else:
                    parent.grad += pg
            else:
                key = id(parent)
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg
    tape.consumed = True
    if _state.tape is tape:
        _state.tape = Tape()
