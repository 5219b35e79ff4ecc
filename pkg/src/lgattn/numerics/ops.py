"""Differentiable primitives over :class:`Tensor`.

Each op computes its value with numpy and, when a tape is active and any
input requires grad, records a closure mapping the output gradient to input
gradients. Binary elementwise ops follow numpy broadcasting; their backward
sums the gradient back down to each operand's shape.
"""

from __future__ import annotations

import math

import numpy as np

from lgattn.errors import ContractError, DegenerateError, ShapeError, TokenRangeError
from lgattn.numerics.tensor import Tensor, make_result

_GELU_C = math.sqrt(2.0 / math.pi)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return make_result("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return make_result("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_result("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return make_result("div", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g * c,)

    return make_result("scale", a.data * c, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU (the GPT-2 form)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 a x^2), built in place
        xx = x * x
        xx *= 3 * 0.044715 * _GELU_C
        xx += _GELU_C
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        sech2 *= x
        sech2 *= xx
        sech2 += t
        sech2 += 1.0
        sech2 *= 0.5
        sech2 *= g
        return (sech2,)

    return make_result("gelu", out, (a,), backward)


# -- reductions ----------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g.reshape(np.shape(out)), axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result("sum", out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra ------------------------------------------------------------

def _dense(x: np.ndarray) -> np.ndarray:
    # batched BLAS is much faster on contiguous stacks than on strided views
    return np.ascontiguousarray(x) if x.ndim > 2 else x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched contraction of the last axis of ``a`` with the second-last of ``b``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from None
    flat = b.ndim == 2 and a.ndim > 2  # activations @ weight: one GEMM over all rows
    if flat:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = np.matmul(_dense(a.data), _dense(b.data))

    def backward(g):
        ga = np.matmul(_dense(g), _dense(np.swapaxes(b.data, -1, -2))) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif flat:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(_dense(np.swapaxes(a.data, -1, -2)), _dense(g))
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return make_result("matmul", out, (a, b), backward)


# -- shape manipulation --------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return make_result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return make_result("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    if out.ndim == 0:
        out = out.reshape(1)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[index] += g.reshape(full[index].shape)
        else:
            np.add.at(full, index, g.reshape(a.data[index].shape))
        return (full,)

    return make_result("getitem", np.ascontiguousarray(out), (a,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat along {axis}: incompatible {tensors[0].shape} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make_result("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def pad(a: Tensor, pad_width) -> Tensor:
    """Zero-pad; ``pad_width`` is a per-axis list of (before, after) pairs."""
    pad_width = [tuple(p) for p in pad_width]
    if len(pad_width) != a.ndim:
        raise ShapeError(f"pad width has {len(pad_width)} axes, tensor has {a.ndim}")
    if all(p == (0, 0) for p in pad_width):
        return a
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    out = np.pad(a.data, pad_width)
    return make_result("pad", out, (a,), lambda g: (np.ascontiguousarray(g[slices]),))


# -- embeddings and normalization ----------------------------------------------

def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TokenRangeError(f"embedding ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise TokenRangeError(f"token id out of range [0, {vocab}): min {ids.min()}, max {ids.max()}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return make_result("embedding", table.data[ids], (table,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm params {gain.shape}/{bias.shape} do not match last axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        red = tuple(range(x.ndim - 1))
        dgain = (g * xhat).sum(axis=red)
        dbias = g.sum(axis=red)
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return make_result("layer_norm", out, (x, gain, bias), backward)


# -- attention normalization and loss ------------------------------------------

def softmax_masked(logits: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Masked entries come out exactly zero. Every row must keep at least one
    entry, otherwise :class:`DegenerateError` is raised.
    """
    x = logits.data
    if mask is None:
        m = None
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        m = np.asarray(mask, dtype=bool)
        try:
            m = np.broadcast_to(m, x.shape)
        except ValueError:
            raise ShapeError(f"mask shape {np.shape(mask)} does not broadcast to logits {x.shape}") from None
        if not m.any(axis=-1).all():
            raise DegenerateError("softmax row has no unmasked entries")
        e = np.where(m, x, -np.inf)
        e -= e.max(axis=-1, keepdims=True)
        np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    y = e

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        out = g - dot
        out *= y
        return (out,)

    return make_result("softmax_masked", y, (logits,), backward)


def cross_entropy(logits: Tensor, targets, ignore_mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``logits`` (last axis = vocab).

    Positions where ``ignore_mask`` is true are excluded from the mean.
    """
    x = logits.data
    vocab = x.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != x.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {x.shape[:-1]}")
    keep = np.ones(targets.shape, dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise DegenerateError("every target position is ignored")
    live = targets[keep]
    if live.min() < 0 or live.max() >= vocab:
        raise TokenRangeError(f"target id out of range [0, {vocab})")
    safe = np.where(keep, targets, 0)
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * keep).sum() / count

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        return ((p - onehot) * (keep[..., None] * (g.reshape(()) / count)),)

    return make_result("cross_entropy", np.asarray([loss], dtype=x.dtype), (logits,), backward)
