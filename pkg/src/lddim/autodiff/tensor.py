"""Define-by-run reverse-mode autodiff on float64 numpy arrays.

A :class:`Tape` is opened as a context manager; every operation on tensors
that require gradients appends a node to the innermost active tape.
:func:`backward` then walks the tape once in reverse.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()


class ShapeError(ValueError):
    """Raised when an operation receives incompatible operand shapes."""


def _shape_error(op: str, *shapes) -> ShapeError:
    shown = ", ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {shown}")


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> int | None:
        return None if self.node is None else self.node.index

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the implementations live in ``ops``
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by Python scalars")
        return ops.mul(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


class Node:
    __slots__ = ("index", "op", "inputs", "output", "backward_fn", "tape")

    def __init__(self, index, op, inputs, output, backward_fn, tape):
        self.index = index
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Append-only record of differentiable operations.

    Nodes are stored in execution order, so inputs always precede the node
    that consumes them. A tape is meant for a single thread; open separate
    tapes in separate threads.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[int, Tensor] = {}
        self.visits = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def owns(self, t: Tensor) -> bool:
        return t.node is not None and t.node.tape is self

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    ) -> Tensor:
        for t in inputs:
            if t.requires_grad and not self.owns(t):
                self.leaves.setdefault(id(t), t)
        node = Node(len(self.nodes), op, tuple(inputs), output, backward_fn, self)
        output.node = node
        output.requires_grad = True
        self.nodes.append(node)
        return output


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out`` in a tensor and put it on the active tape when needed."""
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.requires_grad = False
    result.node = None
    result.name = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, result, backward_fn)
    return result


def vjp(tape: Tape, output: Tensor, cotangent) -> dict[Tensor, np.ndarray]:
    """Pull ``cotangent`` back from ``output`` to every leaf of ``tape``.

    Every node is visited exactly once; ``tape.visits`` holds the count.
    Leaves without a path to ``output`` receive zero gradients.
    """
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != output.shape:
        raise _shape_error("vjp", output.shape, cot.shape)
    grads: dict[int, np.ndarray] = {id(output): cot}
    tape.visits = 0
    for node in reversed(tape.nodes):
        tape.visits += 1
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = {}
    for key, leaf in tape.leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else g
        result[leaf] = leaf.grad
    if output.requires_grad and not tape.owns(output):
        output.grad = cot
        result[output] = cot
    return result


def backward(tape: Tape, output: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``output`` with respect to every leaf on ``tape``."""
    if output.data.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    return vjp(tape, output, np.ones_like(output.data))


def tensors(arrays: Iterable, requires_grad: bool = False) -> list[Tensor]:
    return [Tensor(a, requires_grad=requires_grad) for a in arrays]
