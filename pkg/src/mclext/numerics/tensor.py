"""Differentiable tensor and the explicit reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape`.  Outside a
tape (or when no input requires a gradient) they run as plain numpy code, which
is what inference uses.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = ops.sum(ops.mul(w, w))
    ...     tape.backward(loss)
    >>> w.grad
    array([2., 2., 2.])
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []


class Tensor:
    """Dense array plus an accumulated gradient of identical shape."""

    __slots__ = ("value", "_grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        value = np.asarray(value)
        if value.dtype not in (np.float32, np.float64):
            value = value.astype(np.float64)
        self.value = value
        self._grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = None if g is None else np.asarray(g, dtype=self.value.dtype)

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.value

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.value.astype(dtype), self.requires_grad, self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.  ``backward`` replays the record in reverse exactly once and
    then clears it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, loss: Tensor, grad=None) -> None:
        if grad is None:
            if loss.value.size != 1:
                raise ValueError("backward without an explicit gradient needs a scalar loss")
            grad = np.ones_like(loss.value)
        loss._grad = np.asarray(grad, dtype=loss.value.dtype).reshape(loss.shape)
        for node in reversed(self.nodes):
            g_out = node.out._grad
            if g_out is None:
                continue
            grads = node.backward(g_out)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp._grad is None:
                    inp._grad = np.array(g, dtype=inp.value.dtype, copy=True).reshape(inp.shape)
                else:
                    inp._grad += g
        self.clear()


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def make_result(value: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``value`` and record ``backward`` if any input needs a gradient.

    ``backward(g_out)`` must return one gradient (or None) per input, each
    already reduced to that input's shape.
    """
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), backward)
    return out
