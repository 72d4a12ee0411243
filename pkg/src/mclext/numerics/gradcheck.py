"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import NumericalError
from . import ops
from .tensor import Tape, Tensor


@dataclass
class GradReport:
    max_rel_err: float
    passed: bool
    per_input: list[float] = field(default_factory=list)
    worst_index: tuple | None = None
    grad_max: list[float] = field(default_factory=list)  # max |analytic| per input


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Elementwise relative error with a denominator floor.

    The floor is ``floor * max|numeric|`` so entries whose true gradient is
    negligible against the rest of the tensor do not dominate the report.
    """
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)
    denom = np.where(denom == 0, 1.0, denom)
    return np.abs(analytic - numeric) / denom


def _scalar(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> float:
    out = fn(*inputs)
    val = float(np.sum(out.value))
    if not np.isfinite(val):
        raise NumericalError("non-finite output during finite differencing")
    return val


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    check: Sequence[bool] | None = None,
) -> GradReport:
    """Compare tape gradients of ``sum(fn(*inputs))`` with central differences.

    Inputs are promoted to float64.  ``max_entries`` caps the number of
    coordinates probed per input (chosen at random with ``seed``); ``check``
    selects which inputs are differentiated.
    """
    tensors = [Tensor(np.array(np.asarray(getattr(x, "value", x)), dtype=np.float64), requires_grad=True) for x in inputs]
    check = [True] * len(tensors) if check is None else list(check)
    for t in tensors:
        if not np.all(np.isfinite(t.value)):
            bad = np.argwhere(~np.isfinite(t.value))[0]
            raise NumericalError(f"non-finite input value at index {tuple(bad)}")

    with Tape() as tape:
        out = fn(*tensors)
        if not np.all(np.isfinite(out.value)):
            bad = np.argwhere(~np.isfinite(out.value))[0]
            raise NumericalError(f"non-finite output at index {tuple(bad)}")
        tape.backward(ops.sum(out))

    rng = np.random.default_rng(seed)
    worst, worst_idx, per_input, grad_max = 0.0, None, [], []
    for k, (t, on) in enumerate(zip(tensors, check)):
        if not on:
            per_input.append(0.0)
            grad_max.append(0.0)
            continue
        analytic = t.grad.copy()
        grad_max.append(float(np.abs(analytic).max(initial=0.0)))
        flat = t.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar(fn, tensors)
            flat[i] = orig - step
            fm = _scalar(fn, tensors)
            flat[i] = orig
            numeric[n] = (fp - fm) / (2 * step)
        rel = relative_error(analytic.reshape(-1)[idx], numeric)
        err = float(rel.max(initial=0.0))
        per_input.append(err)
        if err >= worst:
            worst = err
            worst_idx = (k, int(idx[int(np.argmax(rel))])) if rel.size else (k, None)
    return GradReport(max_rel_err=worst, passed=worst < tolerance, per_input=per_input, worst_index=worst_idx,
                      grad_max=grad_max)
