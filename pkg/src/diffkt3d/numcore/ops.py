"""Differentiable primitives.

Every function accepts Tensors or array-likes and returns a Tensor. The
backward rule is only built when the active tape tracks an operand.
"""

from __future__ import annotations

import builtins

import numpy as np

from .tensor import ShapeError, Tensor, _active_tape

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _emit(out, inputs, make_vjp):
    tape = _active_tape()
    if tape is None or not any(isinstance(x, Tensor) and x.tape is tape
                               and x.node is not None for x in inputs):
        return Tensor(out)
    return tape.record(out, inputs, make_vjp())


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shapes(a, b, name):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise binary -----------------------------------------------------------

def add(a, b):
    x, y = _data(a), _data(b)
    _broadcast_shapes(x, y, "add")
    return _emit(x + y, (a, b), lambda: lambda g, n: (
        _unbroadcast(g, x.shape) if n[0] else None,
        _unbroadcast(g, y.shape) if n[1] else None))


def sub(a, b):
    x, y = _data(a), _data(b)
    _broadcast_shapes(x, y, "sub")
    return _emit(x - y, (a, b), lambda: lambda g, n: (
        _unbroadcast(g, x.shape) if n[0] else None,
        _unbroadcast(-g, y.shape) if n[1] else None))


def mul(a, b):
    x, y = _data(a), _data(b)
    _broadcast_shapes(x, y, "mul")
    return _emit(x * y, (a, b), lambda: lambda g, n: (
        _unbroadcast(g * y, x.shape) if n[0] else None,
        _unbroadcast(g * x, y.shape) if n[1] else None))


def div(a, b):
    x, y = _data(a), _data(b)
    _broadcast_shapes(x, y, "div")
    out = x / y
    return _emit(out, (a, b), lambda: lambda g, n: (
        _unbroadcast(g / y, x.shape) if n[0] else None,
        _unbroadcast(-g * out / y, y.shape) if n[1] else None))


def neg(a):
    return _emit(-_data(a), (a,), lambda: lambda g, n: (-g,))


# elementwise unary ------------------------------------------------------------

def square(a):
    x = _data(a)
    return _emit(x * x, (a,), lambda: lambda g, n: (2.0 * x * g,))


def exp(a):
    out = np.exp(_data(a))
    return _emit(out, (a,), lambda: lambda g, n: (g * out,))


def log(a):
    x = _data(a)
    return _emit(np.log(x), (a,), lambda: lambda g, n: (g / x,))


def sqrt(a):
    out = np.sqrt(_data(a))
    return _emit(out, (a,), lambda: lambda g, n: (0.5 * g / out,))


def tanh(a):
    out = np.tanh(_data(a))
    return _emit(out, (a,), lambda: lambda g, n: (g * (1.0 - out * out),))


def abs(a):
    x = _data(a)
    return _emit(np.abs(x), (a,), lambda: lambda g, n: (g * np.sign(x),))


def silu(a):
    x = _data(a)
    s = 1.0 / (1.0 + np.exp(-x))
    return _emit(x * s, (a,), lambda: lambda g, n: (g * s * (1.0 + x * (1.0 - s)),))


def gelu(a):
    """tanh-approximated GELU."""
    x = _data(a)
    x2 = x * x
    th = np.tanh(_SQRT_2_OVER_PI * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def make():
        def vjp(g, n):
            dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
            return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)
        return vjp
    return _emit(out, (a,), make)


# linear algebra ---------------------------------------------------------------

def matmul(a, b):
    x, y = _data(a), _data(b)
    if x.ndim < 2 or y.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-d operands, got {x.shape} and {y.shape}")
    if x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {x.shape} @ {y.shape}")
    if y.ndim == 2 and x.ndim > 2:
        return _matmul_weight(a, b, x, y)
    out = np.matmul(x, y)

    def make():
        def vjp(g, n):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape) if n[0] else None
            gb = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape) if n[1] else None
            return ga, gb
        return vjp
    return _emit(out, (a, b), make)


def _matmul_weight(a, b, x, y):
    # stacked input times a shared matrix: fold the leading axes into one GEMM
    x2 = x.reshape(-1, x.shape[-1])
    out = (x2 @ y).reshape(x.shape[:-1] + (y.shape[-1],))

    def make():
        def vjp(g, n):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ y.T).reshape(x.shape) if n[0] else None
            gb = x2.T @ g2 if n[1] else None
            return ga, gb
        return vjp
    return _emit(out, (a, b), make)


# reductions -------------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):
    x = _data(a)
    out = x.sum(axis=axis, keepdims=keepdims)
    return _emit(out, (a,), lambda: lambda g, n: (
        np.array(_expand(g, x.shape, axis, keepdims)),))


def mean(a, axis=None, keepdims=False):
    x = _data(a)
    out = x.mean(axis=axis, keepdims=keepdims)
    count = x.size / max(out.size, 1)
    return _emit(out, (a,), lambda: lambda g, n: (
        np.array(_expand(g, x.shape, axis, keepdims)) / count,))


# normalization / softmax ------------------------------------------------------

def layer_norm(a, eps=1e-6):
    """Normalize over the last axis; no affine parameters."""
    x = _data(a)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def make():
        def vjp(g, n):
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            return (inv * (g - gm - y * gy),)
        return vjp
    return _emit(y, (a,), make)


def softmax(a, axis=-1):
    x = _data(a)
    y = np.subtract(x, x.max(axis=axis, keepdims=True))
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def make():
        def vjp(g, n):
            dx = g * y
            dx -= y * dx.sum(axis=axis, keepdims=True)
            return (dx,)
        return vjp
    return _emit(y, (a,), make)


# shape / gather ---------------------------------------------------------------

def reshape(a, shape):
    x = _data(a)
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from None
    return _emit(out, (a,), lambda: lambda g, n: (g.reshape(x.shape),))


def transpose(a, axes=None):
    x = _data(a)
    out = np.transpose(x, axes)
    inv = None if axes is None else np.argsort(axes)
    return _emit(out, (a,), lambda: lambda g, n: (np.transpose(g, inv),))


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return builtins.all(isinstance(i, (int, slice, type(None), type(Ellipsis)))
                        or (isinstance(i, np.integer)) for i in items)


def take(a, index):
    """Indexing / gather; repeated indices accumulate in the backward pass."""
    x = _data(a)
    try:
        out = x[index]
    except IndexError as err:
        raise ShapeError(f"index out of range for shape {x.shape}: {err}") from None
    basic = _is_basic(index)

    def make():
        def vjp(g, n):
            gx = np.zeros(x.shape)
            if basic:
                gx[index] += g
            else:
                np.add.at(gx, index, g)
            return (gx,)
        return vjp
    return _emit(np.array(out, dtype=np.float64), (a,), make)


def concat(tensors, axis=0):
    arrays = [_data(t) for t in tensors]
    ref = arrays[0]
    ax = axis % ref.ndim
    for arr in arrays[1:]:
        if arr.ndim != ref.ndim or any(arr.shape[i] != ref.shape[i]
                                       for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {arr.shape}")
    out = np.concatenate(arrays, axis=ax)
    splits = np.cumsum([arr.shape[ax] for arr in arrays])[:-1]

    def make():
        def vjp(g, n):
            parts = np.split(g, splits, axis=ax)
            return tuple(p if need else None for p, need in zip(parts, n))
        return vjp
    return _emit(out, tuple(tensors), make)


def stop_gradient(a):
    return Tensor(_data(a))
