"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations are plain functions. When a :class:`Tape` is active (``with
Tape() as tape:``) and at least one input requires a gradient, the
operation appends a node holding its inputs, its output and a closure that
maps the output gradient to input gradients. Outside a tape the same
functions are ordinary numpy computations, which is how frozen networks
are evaluated.

    >>> w = Tensor([[1.0], [2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(matmul(Tensor([[3.0, 4.0]]), w))
    >>> backward(loss, tape)
    >>> w.grad.ravel().tolist()
    [3.0, 4.0]
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from dih.errors import ContractError, DimensionError, NumericalError, TapeStateError

_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("dih_tape", default=None)


class Tensor:
    """Dense row-major float64 array with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.values: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> Tensor:
        # skip the defensive copy for freshly computed outputs
        t = cls.__new__(cls)
        t.values = np.ascontiguousarray(arr, dtype=np.float64)
        t.grad = None
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> Tensor:
        return Tensor(self.values, requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered record of the primitive operations of one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._spent = False
        self._token = None

    def __enter__(self) -> Tape:
        if self._token is not None:
            raise TapeStateError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        if self._spent:
            raise TapeStateError("cannot record onto a tape after backward; call reset() first")
        self.nodes.append(_Node(output, inputs, backward_fn))

    def reset(self) -> None:
        """Forget recorded nodes so the tape can serve a fresh forward pass."""
        self.nodes.clear()
        self._spent = False

    def backward(self, root: Tensor) -> None:
        if root.values.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if self._spent:
            raise TapeStateError("backward already ran on this tape; call reset() first")
        self._spent = True

        produced = {id(n.output) for n in self.nodes}
        if id(root) not in produced:
            # constant root, or a bare leaf
            if root.requires_grad:
                root.grad = np.ones_like(root.values)
            return

        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward_fn(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            leaf.grad = grads[key]


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def backward(root: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every gradient-requiring leaf reachable from ``root``."""
    tape.backward(root)


def _emit(out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericalError("operation produced a non-finite value")
    needs = any(t.requires_grad for t in inputs)
    tape = _ACTIVE_TAPE.get()
    result = Tensor._wrap(out, needs and tape is not None)
    if result.requires_grad:
        tape.record(result, tuple(inputs), backward_fn)
    return result


# -- primitives ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def back(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _emit(av @ bv, (a, b), back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    x, b = as_tensor(x), as_tensor(b)
    if x.values.ndim != 2 or b.values.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias shape mismatch: {x.shape} + {b.shape}")

    def back(g):
        return g, g.sum(axis=0)

    return _emit(x.values + b.values, (x, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _emit(a.values + b.values, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    av, bv = a.values, b.values
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return _emit(x.values * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0
    return _emit(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit(np.array(x.values.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def log_softmax(z: Tensor) -> Tensor:
    """Row-wise ``z - logsumexp(z)`` using max subtraction."""
    z = as_tensor(z)
    if z.values.ndim != 2 or z.shape[1] < 2:
        raise DimensionError(f"log_softmax needs an m x C input with C >= 2, got {z.shape}")
    shifted = z.values - z.values.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _emit(out, (z,), back)


ACTIVATIONS = ("relu", "identity")


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "identity":
        return x
    raise ContractError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
