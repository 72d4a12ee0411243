"""Differentiable operations on :class:`Tensor`.

Every function here computes its forward pass with numpy and records a
closure that maps the output gradient onto input gradients.  Binary
elementwise ops only broadcast size-1 axes between operands of equal rank.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, make_result

# ---------------------------------------------------------------------------
# helpers


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.ndim != b.ndim:
        raise ShapeError(f"rank mismatch: {a.shape} vs {b.shape}")
    bad = [i for i, (x, y) in enumerate(zip(a.shape, b.shape)) if x != y and x != 1 and y != 1]
    if bad:
        raise ShapeError(f"shapes {a.shape} and {b.shape} not broadcastable on axes {bad}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make_result(a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.value * b.value, (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return make_result(np.where(mask, a.value, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.value)
    return make_result(y, (a,), lambda g: (g * y * (1 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return make_result(y, (a,), lambda g: (g * (1 - y * y),))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul take two operands; relu, sigmoid, tanh one."""
    if kind in _BINARY:
        if b is None:
            raise ShapeError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ConfigError(f"unknown elementwise op {kind!r}")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return make_result(a.value * a.dtype.type(c), (a,), lambda g: (g * c,))


def add_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    return make_result(a.value + a.dtype.type(c), (a,), lambda g: (g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    y = a.value ** p
    return make_result(y, (a,), lambda g: (g * p * a.value ** (p - 1),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.value)
    return make_result(y, (a,), lambda g: (g * 0.5 / y,))


# ---------------------------------------------------------------------------
# reductions and layout


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    y = np.sum(a.value, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return make_result(np.asarray(y), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return make_result(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return make_result(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.ndim != len(shape) or any(x != y and x != 1 for x, y in zip(a.shape, shape)):
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
    y = np.ascontiguousarray(np.broadcast_to(a.value, shape))
    return make_result(y, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return make_result(np.concatenate([t.value for t in tensors], axis=axis), tensors, backward)


def slice_axis(a, axis: int, start: int, stop: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.shape[axis]
    stop = n if stop is None else stop
    if not (0 <= start < stop <= n):
        raise IndexError(f"slice [{start}:{stop}] out of range for axis {axis} of size {n}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.value)
        full[idx] = g
        return (full,)

    return make_result(a.value[idx].copy(), (a,), backward)


def slice_time(a, start: int) -> Tensor:
    """Keep frames ``start:`` of a ``[..., D, T, F]`` tensor."""
    a = as_tensor(a)
    n = a.shape[-2]
    if not 0 <= start < n:
        raise IndexError(f"start frame {start} outside [0, {n})")
    return slice_axis(a, a.ndim - 2, start)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is ``[D_in, D_out]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input last axis {x.shape[-1]} != weight rows {w.shape[0]}")
    inputs = [x, w] if b is None else [x, w, as_tensor(b)]
    y = x.value @ w.value
    if b is not None:
        y = y + inputs[2].value

    def backward(g):
        gx = g @ w.value.T if x.requires_grad else None
        gw = x.value.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        grads = [gx, gw]
        if b is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return grads

    return make_result(y, inputs, backward)


# ---------------------------------------------------------------------------
# convolution


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected [D, T, F] or [N, D, T, F], got {x.shape}")
    return x, False


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _im2col(xp: np.ndarray, kt: int, kf: int, st: int, sf: int, to: int, fo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kt, kf, to, fo), dtype=xp.dtype)
    for i in range(kt):
        for j in range(kf):
            cols[:, :, i, j] = xp[:, :, i: i + st * (to - 1) + 1: st, j: j + sf * (fo - 1) + 1: sf]
    return cols.reshape(n, c * kt * kf, to * fo)


def _col2im(cols: np.ndarray, shape, kt, kf, st, sf, to, fo) -> np.ndarray:
    n, c = shape[:2]
    xp = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kt, kf, to, fo)
    for i in range(kt):
        for j in range(kf):
            xp[:, :, i: i + st * (to - 1) + 1: st, j: j + sf * (fo - 1) + 1: sf] += cols[:, :, i, j]
    return xp


def _conv_forward(x, w, stride, padding):
    n, cin, t, f = x.shape
    cout, cin_w, kt, kf = w.shape
    st, sf = stride
    pt, pf = padding
    to, fo = _conv_out(t, kt, st, pt), _conv_out(f, kf, sf, pf)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (pf, pf)))
    cols = _im2col(xp, kt, kf, st, sf, to, fo)
    y = np.matmul(w.reshape(cout, -1), cols).reshape(n, cout, to, fo)
    return y, cols, xp.shape


def _conv_input_grad(g, w, x_shape, stride, padding):
    n, cout, to, fo = g.shape
    _, cin, kt, kf = w.shape
    st, sf = stride
    pt, pf = padding
    t, f = x_shape[2], x_shape[3]
    cols = np.matmul(w.reshape(cout, -1).T, g.reshape(n, cout, to * fo))
    xp = _col2im(cols, (n, cin, t + 2 * pt, f + 2 * pf), kt, kf, st, sf, to, fo)
    return xp[:, :, pt: pt + t, pf: pf + f]


def _check_conv(x: Tensor, w: Tensor, stride, padding, cin_axis: int) -> None:
    if w.ndim != 4:
        raise ShapeError(f"kernel must be 4-D, got {w.shape}")
    if x.shape[1] != w.shape[cin_axis]:
        raise ShapeError(f"channel axis: input has {x.shape[1]}, kernel expects {w.shape[cin_axis]}")
    if min(stride) < 1:
        raise ShapeError(f"strides must be >= 1, got {stride}")
    for axis, (size, k, p) in zip(("time", "freq"), zip(x.shape[2:], w.shape[2:], padding)):
        if k > size + 2 * p and cin_axis == 1:
            raise ShapeError(f"{axis} axis: kernel {k} exceeds padded input {size + 2 * p}")


def conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation. ``x`` is ``[N, D_in, T, F]`` (or unbatched), ``w`` is ``[D_out, D_in, kT, kF]``."""
    x, unbatched = _batched(as_tensor(x))
    w = as_tensor(w)
    stride, padding = _pair(stride), _pair(padding)
    _check_conv(x, w, stride, padding, cin_axis=1)
    y, cols, _ = _conv_forward(x.value, w.value, stride, padding)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        y = y + b.value[None, :, None, None]
        inputs.append(b)

    def backward(g):
        gx = _conv_input_grad(g, w.value, x.shape, stride, padding) if x.requires_grad else None
        n, cout = g.shape[:2]
        gw = np.matmul(g.reshape(n, cout, -1), cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    out = make_result(y, inputs, backward)
    return reshape(out, out.shape[1:]) if unbatched else out


def deconv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Transposed convolution: the input-gradient operator of :func:`conv2d`.

    ``w`` has the conv layout ``[D_in, D_out, kT, kF]`` where ``D_in`` is the
    channel count of ``x``; output length per axis is ``(T-1)*s - 2p + k``.
    """
    x, unbatched = _batched(as_tensor(x))
    w = as_tensor(w)
    stride, padding = _pair(stride), _pair(padding)
    _check_conv(x, w, stride, padding, cin_axis=0)
    n, _, t, f = x.shape
    _, cout, kt, kf = w.shape
    out_shape = (n, cout, (t - 1) * stride[0] - 2 * padding[0] + kt, (f - 1) * stride[1] - 2 * padding[1] + kf)
    if out_shape[2] < 1 or out_shape[3] < 1:
        raise ShapeError(f"deconv2d output would be empty: {out_shape}")
    y = _conv_input_grad(x.value, w.value, out_shape, stride, padding)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        y = y + b.value[None, :, None, None]
        inputs.append(b)

    def backward(g):
        gx, cols, _ = _conv_forward(g, w.value, stride, padding) if x.requires_grad else (None, None, None)
        if cols is None:
            gp = np.pad(g, ((0, 0), (0, 0), (padding[0],) * 2, (padding[1],) * 2))
            cols = _im2col(gp, kt, kf, stride[0], stride[1], t, f)
        gw = np.matmul(x.value.reshape(n, x.shape[1], -1), cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    out = make_result(y, inputs, backward)
    return reshape(out, out.shape[1:]) if unbatched else out


# ---------------------------------------------------------------------------
# normalization


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """GroupNorm over ``[N, D, T, F]`` (or unbatched ``[D, T, F]``)."""
    x, unbatched = _batched(as_tensor(x))
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    n, d, t, f = x.shape
    if groups < 1 or d % groups:
        raise ConfigError(f"channel count {d} not divisible by groups={groups}")
    xg = x.value.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * rstd).reshape(x.shape)
    y = xhat * gamma.value[None, :, None, None] + beta.value[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = (g * gamma.value[None, :, None, None]).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = rstd * (gxhat - gxhat.mean(axis=2, keepdims=True) - xh * (gxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, gg, gb

    out = make_result(y.astype(x.dtype), (x, gamma, beta), backward)
    return reshape(out, out.shape[1:]) if unbatched else out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.value.mean(axis=-1, keepdims=True)
    var = x.value.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * rstd
    y = xhat * gamma.value + beta.value

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.value
            gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result(y.astype(x.dtype), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# recurrence


def bidirectional_recurrence(x, w_ih, w_hh, bias) -> Tensor:
    """Bidirectional LSTM over the step axis.

    ``x`` is ``[batch, steps, D_in]`` (or ``[steps, D_in]``).  Weights carry a
    leading direction axis: ``w_ih [2, D_in, 4H]``, ``w_hh [2, H, 4H]``,
    ``bias [2, 4H]``, with gates packed as input, forget, output, candidate.
    Returns ``[batch, steps, 2H]`` with forward outputs first.  Initial state
    is zero.
    """
    x, w_ih, w_hh, bias = (as_tensor(v) for v in (x, w_ih, w_hh, bias))
    squeeze = x.ndim == 2
    xv = x.value[None] if squeeze else x.value
    if xv.ndim != 3:
        raise ShapeError(f"recurrence input must be [batch, steps, D_in], got {x.shape}")
    nb, steps, din = xv.shape
    if steps < 1:
        raise ShapeError("recurrence needs at least one step")
    hid = w_hh.shape[1]
    if w_ih.shape != (2, din, 4 * hid) or w_hh.shape != (2, hid, 4 * hid) or bias.shape != (2, 4 * hid):
        raise ShapeError(
            f"recurrence weights {w_ih.shape}, {w_hh.shape}, {bias.shape} inconsistent with D_in={din}, H={hid}"
        )
    dt = xv.dtype
    # step-major layout keeps every per-step slice contiguous
    xs = np.stack([xv.transpose(1, 0, 2), xv[:, ::-1].transpose(1, 0, 2)])  # [2, steps, nb, din]
    acts, cells, tcs, hs = _lstm_forward(xs, w_ih.value, w_hh.value, bias.value)
    out = np.concatenate([hs[0], hs[1][::-1]], axis=-1).transpose(1, 0, 2)
    if squeeze:
        out = out[0]

    def backward(g):
        g = g[None] if squeeze else g
        g = g.transpose(1, 0, 2)
        dh_seq = np.stack([g[..., :hid], g[::-1, :, hid:]])
        dz = _lstm_backward(dh_seq, acts, cells, tcs, w_hh.value)
        flat_dz = dz.reshape(2, steps * nb, 4 * hid)
        gw_ih = np.matmul(xs.reshape(2, steps * nb, din).transpose(0, 2, 1), flat_dz)
        h_prev = np.concatenate([np.zeros((2, 1, nb, hid), dtype=dt), hs[:, :-1]], axis=1)
        gw_hh = np.matmul(h_prev.reshape(2, steps * nb, hid).transpose(0, 2, 1), flat_dz)
        gb = flat_dz.sum(axis=1)
        gx = None
        if x.requires_grad:
            gxs = np.matmul(flat_dz, w_ih.value.transpose(0, 2, 1)).reshape(2, steps, nb, din)
            gx = (gxs[0] + gxs[1][::-1]).transpose(1, 0, 2)
            if squeeze:
                gx = gx[0]
        return gx, gw_ih, gw_hh, gb

    return make_result(np.ascontiguousarray(out), (x, w_ih, w_hh, bias), backward)


def _lstm_forward(xs, w_ih, w_hh, bias):
    """Run both directions; returns gate activations, cells, tanh(cells), hiddens."""
    nd, steps, nb, din = xs.shape
    hid = w_hh.shape[1]
    dt = xs.dtype
    # sigmoid(z) = 0.5 + 0.5 tanh(z / 2): prescale the sigmoid gates so one tanh covers all four
    half = np.ones(4 * hid, dtype=dt)
    half[: 3 * hid] = 0.5
    acts = np.matmul(xs.reshape(nd, steps * nb, din), w_ih * half).reshape(nd, steps, nb, 4 * hid)
    acts += (bias * half)[:, None, None, :]
    whh = w_hh * half
    cells = np.empty((nd, steps, nb, hid), dtype=dt)
    tcs = np.empty_like(cells)
    hs = np.empty_like(cells)
    h = np.zeros((nd, nb, hid), dtype=dt)
    c = np.zeros((nd, nb, hid), dtype=dt)
    tmp = np.empty_like(c)
    z = np.empty((nd, nb, 4 * hid), dtype=dt)
    for t in range(steps):
        a = acts[:, t]
        np.matmul(h, whh, out=z)
        a += z
        np.tanh(a, out=a)
        sg = a[..., : 3 * hid]
        sg *= 0.5
        sg += 0.5
        np.multiply(a[..., hid: 2 * hid], c, out=c)
        np.multiply(a[..., :hid], a[..., 3 * hid:], out=tmp)
        c += tmp
        cells[:, t] = c
        np.tanh(c, out=tcs[:, t])
        np.multiply(a[..., 2 * hid: 3 * hid], tcs[:, t], out=h)
        hs[:, t] = h
    return acts, cells, tcs, hs


def _lstm_backward(dh_seq, acts, cells, tcs, w_hh):
    """Backpropagate through time; returns gradients w.r.t. gate pre-activations."""
    nd, steps, nb, hid = cells.shape
    dt = cells.dtype
    dz = np.empty_like(acts)
    whh_t = w_hh.transpose(0, 2, 1).copy()
    dh = np.empty((nd, nb, hid), dtype=dt)
    dc = np.zeros((nd, nb, hid), dtype=dt)
    dh_next = np.zeros((nd, nb, hid), dtype=dt)
    tmp = np.empty_like(dh)
    one_minus = np.empty((nd, nb, 4 * hid), dtype=dt)
    for t in range(steps - 1, -1, -1):
        a = acts[:, t]
        ig, fg, og, cg = a[..., :hid], a[..., hid: 2 * hid], a[..., 2 * hid: 3 * hid], a[..., 3 * hid:]
        tc = tcs[:, t]
        d = dz[:, t]
        np.add(dh_seq[:, t], dh_next, out=dh)
        # dc carries dc_{t+1} * f_{t+1} from the previous iteration
        np.multiply(tc, tc, out=tmp)
        np.subtract(1, tmp, out=tmp)
        tmp *= og
        tmp *= dh
        dc += tmp
        # s (1 - s) for the sigmoid gates; the candidate slot is overwritten below
        np.subtract(1, a, out=one_minus)
        np.multiply(a, one_minus, out=d)
        d[..., :hid] *= cg
        d[..., :hid] *= dc
        if t > 0:
            d[..., hid: 2 * hid] *= cells[:, t - 1]
            d[..., hid: 2 * hid] *= dc
        else:
            d[..., hid: 2 * hid] = 0
        d[..., 2 * hid: 3 * hid] *= tc
        d[..., 2 * hid: 3 * hid] *= dh
        np.multiply(cg, cg, out=tmp)
        np.subtract(1, tmp, out=tmp)
        tmp *= ig
        np.multiply(tmp, dc, out=d[..., 3 * hid:])
        dc *= fg
        np.matmul(d, whh_t, out=dh_next)
    return dz
