"""Differentiable primitives.

Every op computes its forward value with numpy and registers a backward rule
that maps the output gradient to one gradient per input (``None`` for
non-differentiable inputs).
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # shared weight: fold the batch axes into one big product
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return record("matmul", out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """x @ W (+ b) over the last axis; the shared-MLP building block."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {tuple(shape)}") from None
    return record("broadcast_to", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return record("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in ts)) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record("concat", out, tuple(ts), backward)


def gather(x, index) -> Tensor:
    """Row gather with a leading batch axis.

    ``x`` has shape (B, N, ...), ``index`` integer shape (B, *S) with values in
    [0, N); the result has shape (B, *S, ...).
    """
    x = as_tensor(x)
    idx = np.asarray(index)
    if idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather: batch of index {idx.shape} does not match {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError(f"gather: index out of range for {x.shape}")
    B, N = x.shape[:2]
    tail = x.shape[2:]
    flat = (idx.reshape(B, -1) + (np.arange(B) * N)[:, None]).reshape(-1)
    src = x.data.reshape((B * N,) + tail)
    out = src[flat].reshape(idx.shape + tail)

    def backward(g):
        gx = np.zeros((B * N,) + tail)
        np.add.at(gx, flat, g.reshape((-1,) + tail))
        return (gx.reshape(x.shape),)

    return record("gather", out, (x,), backward)


def reduce_max(x, axis: int) -> Tensor:
    """Max over ``axis``; the gradient goes to the first maximal element."""
    x = as_tensor(x)
    axis = axis % x.ndim
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return record("reduce_max", out, (x,), backward)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("reduce_sum", out, (x,), backward)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return record("reduce_mean", out, (x,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record("softmax", s, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (x,), backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    ``logits`` is (..., C); ``labels`` has the leading shape of ``logits``.
    """
    logits = as_tensor(logits)
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != logits.shape[:-1]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {lab.shape}")
    if lab.size == 0:
        raise ShapeError("softmax_cross_entropy: empty batch")
    C = logits.shape[-1]
    flat = logits.data.reshape(-1, C)
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    l = lab.reshape(-1)
    n = len(l)
    loss = np.mean(lse - z[np.arange(n), l])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), l] -= 1.0
        return ((g * p / n).reshape(logits.shape),)

    return record("softmax_cross_entropy", np.asarray(loss), (logits,), backward)


def batch_norm(x, gamma, beta, running_mean: np.ndarray | None = None,
               running_var: np.ndarray | None = None, training: bool = True,
               momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Normalise over every axis but the last (channels).

    In training mode batch statistics are used and, when running buffers are
    given, updated in place as ``r = momentum*r + (1-momentum)*batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: channel mismatch {x.shape} vs {gamma.shape}/{beta.shape}")
    x2 = x.data.reshape(-1, C)
    m = x2.shape[0]
    if training:
        mu = x2.mean(axis=0)
        xhat = x2 - mu
        var = np.einsum("ij,ij->j", xhat, xhat) / m
        inv = 1.0 / np.sqrt(var + eps)
        xhat *= inv  # centred in place, saves a full-size temporary
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu
            running_var *= momentum
            running_var += (1.0 - momentum) * var * (m / max(m - 1, 1))

        def backward(g):
            g2 = g.reshape(-1, C)
            gbeta = g2.sum(axis=0)
            ggamma = np.einsum("ij,ij->j", g2, xhat)
            gx = xhat * (-ggamma / m)
            gx += g2
            gx -= gbeta / m
            gx *= gamma.data * inv
            return gx.reshape(x.shape), ggamma, gbeta
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x2 - running_mean) * inv

        def backward(g):
            g2 = g.reshape(-1, C)
            return g * (gamma.data * inv), np.einsum("ij,ij->j", g2, xhat), g2.sum(axis=0)

    out = xhat * gamma.data
    out += beta.data
    out = out.reshape(x.shape)
    return record("batch_norm", out, (x, gamma, beta), backward)
