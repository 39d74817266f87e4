"""Tensors, parameters and the recording tape for reverse-mode gradients.

Operations only record onto a tape when one is active (``with Tape() as t``)
and at least one input requires a gradient; outside a tape every op is a
plain numpy computation, which is what evaluation and finite differences use.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_param_ids = itertools.count()
_tape_stack: list["Tape"] = []


class Tensor:
    """Dense float64 array plus the bookkeeping needed to differentiate it."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=DTYPE)
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"{type(self).__name__}(shape={self.shape}{tag})"

    # Operator sugar; the real implementations live in sortnet.ops.
    def __add__(self, other):
        from sortnet import ops

        return ops.add(self, _as_tensor(other, self.shape))

    def __mul__(self, other):
        from sortnet import ops

        return ops.mul(self, _as_tensor(other, self.shape))

    __radd__ = __add__
    __rmul__ = __mul__

    def sum(self):
        from sortnet import ops

        return ops.sum(self)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=DTYPE), shape))


class Param(Tensor):
    """Trainable leaf tensor; ``grad`` accumulates across backward passes."""

    __slots__ = ("grad", "id")

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.id = next(_param_ids)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, value) -> None:
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != self.data.shape:
            raise ValueError(f"cannot assign shape {value.shape} to param of shape {self.shape}")
        self.data = value


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of differentiable ops.

    Nodes are appended as ops execute, so inputs always precede the nodes
    that consume them and a reverse sweep is a valid topological order.
    """

    nodes: list[Node] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)
    _leaves: dict[int, Tensor] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) back through every recorded node.

        Param leaves get their gradient added into ``Param.grad``; all leaf
        gradients are also kept in ``self.grads`` keyed by ``id(tensor)``.
        """
        if seed is None:
            seed = np.ones_like(loss.data)
        pending: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=DTYPE)}
        produced = {id(n.output) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        if id(loss) not in produced:
            leaves[id(loss)] = loss

        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in produced:
                    leaves[key] = inp
                prev = pending.get(key)
                # out-of-place: the same array may have been routed to several inputs
                pending[key] = gi if prev is None else prev + gi

        for key, leaf in leaves.items():
            g = pending.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            g = np.broadcast_to(g, leaf.shape).astype(DTYPE, copy=True)
            self.grads[key] = g
            self._leaves[key] = leaf
            if isinstance(leaf, Param):
                leaf.grad = leaf.grad + g
        return self.grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() target with respect to leaf ``t``."""
        try:
            return self.grads[id(t)]
        except KeyError:
            return np.zeros_like(t.data)


def active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the result of ``op`` and record it if anything needs a gradient."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, backward)
    return out
