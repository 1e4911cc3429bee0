"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` whenever one of their
inputs requires a gradient.  Outside a tape everything runs as plain numpy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; implementations live in ops
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

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, output: Tensor) -> dict:
        return backward(self, output)


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def check_finite(op: str, data: np.ndarray) -> np.ndarray:
    # one reduction is cheaper than an elementwise mask; the sum is finite iff every entry is
    # (barring overflow, which is worth reporting too)
    if data.dtype.kind == "f" and not np.isfinite(data.sum()):
        raise NumericError(f"non-finite value produced by {op}")
    return data


def record(op: str, data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Wrap ``data`` as the result of ``op`` and put it on the active tape."""
    check_finite(op, data)
    tape = active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, out, tuple(inputs), backward_fn))
    return out


def backward(tape: Tape, output: Tensor) -> dict:
    """Propagate d(output) back through ``tape``.

    Leaf tensors (requires_grad, not produced on this tape) receive ``.grad``;
    the mapping leaf -> gradient is also returned.  The tape is cleared.
    """
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    produced = {id(n.out) for n in tape.nodes}
    if id(output) not in produced and not output.requires_grad:
        raise ValueError("output is not on the tape")
    leaves: dict[int, Tensor] = {}
    if output.requires_grad and id(output) not in produced:
        leaves[id(output)] = output
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    result = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g if t.grad is None else t.grad + g
        result[t] = t.grad
    tape.clear()
    return result
