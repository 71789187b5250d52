"""Differentiable primitives with hand-derived backward passes.

Every forward here is a plain function of numpy arrays; its backward takes the
upstream gradient plus whatever the forward returned and hands back input
gradients. Leading batch dimensions broadcast the usual numpy way.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import check_finite

_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return check_finite(a @ b, "matmul output")


def matmul_backward(dout, a, b):
    """Return (dA, dB) for C = A @ B."""
    da = dout @ np.swapaxes(b, -1, -2)
    db = np.swapaxes(a, -1, -2) @ dout
    return _unbroadcast(da, np.shape(a)), _unbroadcast(db, np.shape(b))


def softmax(v, axis=-1):
    v = check_finite(np.asarray(v, dtype=np.float64), "softmax input")
    if v.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dout, y, axis=-1):
    return y * (dout - (dout * y).sum(axis=axis, keepdims=True))


def log_softmax(v, axis=-1):
    v = check_finite(np.asarray(v, dtype=np.float64), "log_softmax input")
    shifted = v - v.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis with population variance.

    Returns ``(y, cache)``; pass the cache to :func:`layer_norm_backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise ValueError(
            f"layer_norm: last axis {x.shape[-1]} vs gamma {gamma.shape} / beta {beta.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gamma + beta
    return check_finite(y, "layer_norm output"), (xhat, rstd, gamma)


def layer_norm_backward(dout, cache):
    """Return (dx, dgamma, dbeta)."""
    xhat, rstd, gamma = cache
    n = xhat.shape[-1]
    lead = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=lead)
    dbeta = dout.sum(axis=lead)
    dxhat = dout * gamma
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n
    )
    return dx, dgamma, dbeta


def gelu(x):
    """tanh-approximation GELU."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def gelu_backward(dout, x):
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def conv2d(x, k, bias=None, stride=1, padding=0):
    """Cross-correlation on channels-last maps.

    ``x`` is ``(H, W, Cin)`` or ``(B, H, W, Cin)``; ``k`` is
    ``(Kh, Kw, Cin, Cout)``. Returns ``(y, cache)``.
    """
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    kh, kw, cin, cout = k.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d: input channels {x.shape[-1]} != kernel Cin {cin}")
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    hp, wp = xp.shape[1:3]
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    b, ho, wo = win.shape[:3]
    cols = win.reshape(b, ho, wo, cin * kh * kw)
    kmat = k.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)
    y = cols @ kmat
    if bias is not None:
        y = y + np.asarray(bias)
    check_finite(y, "conv2d output")
    cache = (cols, kmat, k.shape, xp.shape, stride, padding, squeeze)
    return (y[0] if squeeze else y), cache


def conv2d_backward(dout, cache):
    """Return (dx, dk, dbias)."""
    cols, kmat, kshape, xpshape, stride, padding, squeeze = cache
    if squeeze:
        dout = dout[None]
    kh, kw, cin, cout = kshape
    b, ho, wo = dout.shape[:3]
    dflat = dout.reshape(-1, cout)
    dk = (cols.reshape(-1, cin * kh * kw).T @ dflat).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
    dbias = dflat.sum(axis=0)
    dcols = (dout @ kmat.T).reshape(b, ho, wo, cin, kh, kw)
    dxp = np.zeros(xpshape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[..., i, j]
    hp, wp = xpshape[1:3]
    dx = dxp[:, padding : hp - padding, padding : wp - padding, :]
    return (dx[0] if squeeze else dx), dk, dbias
