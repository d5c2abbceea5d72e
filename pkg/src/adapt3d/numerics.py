"""Dense tensors with reverse-mode differentiation.

Model math runs in float32; float64 tensors are supported so that
finite-difference oracles can check gradients in higher precision.
Elementwise ops broadcast only a trailing-aligned operand across leading
batch axes. Anything richer has to go through ``broadcast_to``, which keeps
the target shape visible at the call site.

Gradients are recorded on an explicit :class:`Tape`. The tape is a Wengert
list: ops append themselves in execution order, which is a topological
order by construction, and ``backward`` walks it once in reverse. A tape
is spent after one backward pass.
"""

from __future__ import annotations

import math
import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NumericError",
    "ShapeError",
    "TapeError",
    "tensor",
    "add",
    "mul",
    "scale",
    "matmul",
    "mean",
    "sum",
    "concat",
    "split",
    "narrow",
    "reshape",
    "transpose",
    "broadcast_to",
    "softmax",
    "layer_norm",
    "gelu",
    "cross_entropy",
    "backward",
]

_FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Gradient-tape misuse: reuse, missing tape, or non-scalar loss."""


_ACTIVE = threading.local()


def _current_tape():
    return getattr(_ACTIVE, "tape", None)


class Tensor:
    """Dense n-d float array, optionally participating in a gradient tape.

    ``grad`` is None until a backward pass populates it. Tensors are never
    mutated by operations; the optimizer is the only writer of ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


class Tape:
    """Execution-ordered record of ops for a single reverse pass."""

    def __init__(self):
        self._nodes = []
        self._spent = False

    def __enter__(self):
        if _current_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        _ACTIVE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.tape = None
        return False

    def _record(self, out, inputs, vjp):
        self._nodes.append((out, inputs, vjp))

    def backward(self, loss):
        if self._spent:
            raise TapeError("tape already consumed by a backward pass")
        if loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        self._spent = True
        loss.grad = np.ones_like(loss.data)
        for out, inputs, vjp in reversed(self._nodes):
            gout = out.grad
            if gout is None:
                continue
            for inp, g in zip(inputs, vjp(gout)):
                if g is None or not inp.requires_grad:
                    continue
                # grad buffers are never mutated in place, so sharing is safe
                inp.grad = g if inp.grad is None else inp.grad + g
        # the tape is spent; dropping the nodes breaks the tensor<->tape
        # reference cycle so plain refcounting reclaims the graph promptly
        self._nodes.clear()


def backward(loss):
    """Run the reverse pass of the tape that produced ``loss``."""
    if loss.tape is None:
        raise TapeError("loss is not attached to a tape")
    loss.tape.backward(loss)


def _result(data, inputs, vjp):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    out.tape = None
    tape = _current_tape()
    if tape is not None and out.requires_grad:
        out.tape = tape
        tape._record(out, inputs, vjp)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (the inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    squeezed = tuple(
        i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1
    )
    if squeezed:
        g = g.sum(axis=squeezed, keepdims=True)
    return g


def _check_suffix(a, b, op):
    sa, sb = a.data.shape, b.data.shape
    k = min(len(sa), len(sb))
    if sa[len(sa) - k :] != sb[len(sb) - k :]:
        raise ShapeError(f"{op}: shapes {sa} and {sb} differ beyond leading batch dims")


def add(a, b):
    _check_suffix(a, b, "add")
    out = a.data + b.data
    sa, sb = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(out, (a, b), vjp)


def mul(a, b):
    _check_suffix(a, b, "mul")
    da, db = a.data, b.data
    out = da * db

    def vjp(g):
        return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)

    return _result(out, (a, b), vjp)


def scale(x, s):
    s = float(s)
    out = x.data * s

    def vjp(g):
        return (g * s,)

    return _result(out, (x,), vjp)


def matmul(a, b):
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2 or da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {da.shape} x {db.shape}")
    try:
        np.broadcast_shapes(da.shape[:-2], db.shape[:-2])
    except ValueError:
        raise ShapeError(
            f"matmul: batch dims of {da.shape} and {db.shape} do not broadcast"
        ) from None
    out = da @ db

    def vjp(g):
        ga = g @ np.swapaxes(db, -1, -2)
        gb = np.swapaxes(da, -1, -2) @ g
        return _unbroadcast(ga, da.shape), _unbroadcast(gb, db.shape)

    return _result(out, (a, b), vjp)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - numpy-style name
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def vjp(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape),)

    return _result(np.asarray(out), (x,), vjp)


def mean(x, axis=None, keepdims=False):
    out = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.data.shape
    count = x.data.size if axis is None else np.prod(
        [shape[i] for i in np.atleast_1d(axis)]
    )

    def vjp(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape) / count,)

    return _result(np.asarray(out), (x,), vjp)


def concat(parts, axis):
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of an empty sequence")
    nd = parts[0].ndim
    axis = _norm_axis(axis, nd)
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if p.ndim != nd or other[:axis] + other[axis + 1 :] != ref[:axis] + ref[axis + 1 :]:
            raise ShapeError(
                f"concat: shape {p.shape} incompatible with {parts[0].shape} on axis {axis}"
            )
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result(out, tuple(parts), vjp)


def _norm_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def narrow(x, axis, start, length):
    axis = _norm_axis(axis, x.ndim)
    extent = x.shape[axis]
    if start < 0 or length < 1 or start + length > extent:
        raise ShapeError(
            f"narrow: window [{start}, {start + length}) outside extent {extent}"
        )
    index = tuple(
        slice(start, start + length) if i == axis else slice(None) for i in range(x.ndim)
    )
    out = x.data[index].copy()
    shape = x.data.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        z[index] = g
        return (z,)

    return _result(out, (x,), vjp)


def split(x, sizes, axis):
    axis = _norm_axis(axis, x.ndim)
    total = 0
    for s in sizes:
        total += s
    if total != x.shape[axis]:
        raise ShapeError(f"split: sizes {tuple(sizes)} do not cover extent {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(narrow(x, axis, start, s))
        start += s
    return out


def reshape(x, shape):
    shape = tuple(shape)
    out = np.reshape(x.data, shape)
    orig = x.data.shape

    def vjp(g):
        return (np.reshape(g, orig),)

    return _result(out, (x,), vjp)


def transpose(x, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _result(out, (x,), vjp)


def broadcast_to(x, shape):
    shape = tuple(shape)
    try:
        if np.broadcast_shapes(x.shape, shape) != shape:
            raise ValueError
    except ValueError:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from None
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    orig = x.data.shape

    def vjp(g):
        return (_unbroadcast(g, orig),)

    return _result(out, (x,), vjp)


def softmax(x, axis=-1):
    d = x.data
    axis = _norm_axis(axis, d.ndim)
    if not np.isfinite(d).all():
        raise NumericError("softmax input contains NaN or Inf")
    m = d.max(axis=axis, keepdims=True)
    e = np.exp(d - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _result(out, (x,), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    d = x.data
    if d.ndim < 1:
        raise ShapeError("layer_norm needs at least one axis")
    width = d.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({width},)"
        )
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = xh * gain.data + bias.data
    gd = gain.data

    def vjp(g):
        gy = g * gd
        gx = inv * (
            gy
            - gy.mean(axis=-1, keepdims=True)
            - xh * (gy * xh).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xh).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x):
    """Tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    d = x.data
    d2 = d * d
    t = np.tanh(_GELU_C * (d + _GELU_A * d2 * d))
    out = 0.5 * d * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * d2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * du),)

    return _result(out, (x,), vjp)


def cross_entropy(logits, labels):
    """Mean negative log softmax-probability of the true class."""
    d = logits.data
    if d.ndim != 2 or d.shape[0] < 1:
        raise ShapeError(f"cross_entropy expects (B, C) logits, got {d.shape}")
    y = np.asarray(labels)
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    n, c = d.shape
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} does not match batch {n}")
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    m = d.max(axis=-1, keepdims=True)
    z = d - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    nll = lse - d[np.arange(n), y]
    out = np.asarray(nll.mean(), dtype=d.dtype)

    def vjp(g):
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), y] -= 1.0
        return (p * (np.asarray(g) / n),)

    return _result(out, (logits,), vjp)
