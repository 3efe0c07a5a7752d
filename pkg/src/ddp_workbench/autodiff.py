"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every primitive applied to its tensors in execution
order.  :meth:`Tape.backward` replays the record in reverse, accumulating
vector-Jacobian products into the requested leaves.  Tapes are cheap and are
rebuilt for every forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, primitive: str, *shapes: tuple[int, ...]):
        self.primitive = primitive
        self.shapes = shapes
        joined = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {joined}")


class GradientError(ValueError):
    """Backward pass requested on an invalid output or input."""


@dataclass
class _Record:
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]]
    name: str


@dataclass
class GradientResult:
    gradient: np.ndarray
    value: float


class Tensor:
    """A node on a tape holding a float64 array."""

    __slots__ = ("tape", "node", "value")

    def __init__(self, tape: "Tape", node: int, value: np.ndarray):
        self.tape = tape
        self.node = node
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> list[float]:
        return self.value.ravel().tolist()

    def __repr__(self) -> str:
        return f"Tensor(node={self.node}, shape={self.shape})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Tape:
    """Ordered log of primitive operations.

    Confined to a single thread; several tapes may read the same parameter
    arrays concurrently because leaves copy nothing and never write.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.shapes: list[tuple[int, ...]] = []
        self.leaves: set[int] = set()

    def _new(self, value: np.ndarray) -> Tensor:
        node = len(self.shapes)
        self.shapes.append(value.shape)
        return Tensor(self, node, value)

    def leaf(self, value) -> Tensor:
        arr = np.asarray(value, dtype=np.float64)
        t = self._new(arr)
        self.leaves.add(t.node)
        return t

    def record(self, name: str, inputs: Sequence[Tensor], value: np.ndarray,
               vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]]) -> Tensor:
        for t in inputs:
            if t.tape is not self:
                raise GradientError(f"{name}: operand belongs to a different tape")
        out = self._new(value)
        self.records.append(_Record(tuple(t.node for t in inputs), out.node, vjp, name))
        return out

    def gradients(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``output`` with respect to each leaf in ``wrt``."""
        if output.tape is not self:
            raise GradientError("output was not recorded on this tape")
        if output.value.size != 1:
            raise GradientError(f"backward needs a scalar output, got shape {output.shape}")
        for t in wrt:
            if t.tape is not self or t.node not in self.leaves:
                raise GradientError(f"node {t.node} is not a leaf of this tape")

        adjoint: dict[int, np.ndarray] = {output.node: np.ones(output.shape)}
        for rec in reversed(self.records):
            g = adjoint.pop(rec.output, None)
            if g is None:
                continue
            for node, contrib in zip(rec.inputs, rec.vjp(g)):
                if node in adjoint:
                    adjoint[node] = adjoint[node] + contrib
                else:
                    adjoint[node] = contrib
        return [adjoint.get(t.node, np.zeros(t.shape)) for t in wrt]

    def backward(self, output: Tensor, wrt: Tensor) -> GradientResult:
        (grad,) = self.gradients(output, [wrt])
        return GradientResult(gradient=grad, value=float(output.value.reshape(())))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return a.tape.record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector added to every row of ``a``."""
    if a.shape == b.shape:
        return a.tape.record("add", (a, b), a.value + b.value, lambda g: (g, g))
    if a.value.ndim == 2 and b.value.ndim == 1 and b.shape[0] == a.shape[1]:
        return a.tape.record("add", (a, b), a.value + b.value,
                             lambda g: (g, g.sum(axis=0)))
    raise ShapeError("add", a.shape, b.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return a.tape.record("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return a.tape.record("scale", (a,), a.value * k, lambda g: (g * k,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return a.tape.record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    on = a.value > 0
    return a.tape.record("relu", (a,), np.where(on, a.value, 0.0), lambda g: (g * on,))


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0):
        raise ValueError("log: non-positive operand")
    av = a.value
    return a.tape.record("log", (a,), np.log(av), lambda g: (g / av,))


def softmax(a: Tensor) -> Tensor:
    """Softmax over a 1-D tensor; backward applies the full Jacobian."""
    if a.value.ndim != 1:
        raise ShapeError("softmax", a.shape)
    z = a.value - a.value.max()
    e = np.exp(z)
    y = e / e.sum()
    jac = np.diag(y) - np.outer(y, y)
    return a.tape.record("softmax", (a,), y, lambda g: (jac.T @ g,))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    av, bv = a.value, b.value
    return a.tape.record("dot", (a, b), np.asarray(np.vdot(av, bv)),
                         lambda g: (g * bv, g * av))


def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return a.tape.record("sum", (a,), np.asarray(a.value.sum()),
                         lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        y = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return a.tape.record("reshape", (a,), y, lambda g: (g.reshape(old),))


def index(a: Tensor, i: int) -> Tensor:
    """Select one entry of a 1-D tensor as a scalar."""
    if a.value.ndim != 1 or not 0 <= i < a.shape[0]:
        raise ShapeError("index", a.shape)
    n = a.shape[0]

    def vjp(g):
        out = np.zeros(n)
        out[i] = g
        return (out,)

    return a.tape.record("index", (a,), np.asarray(a.value[i]), vjp)


def constant(tape: Tape, value) -> Tensor:
    """Leaf that callers never differentiate against."""
    return tape.leaf(value)
