"""Layer building blocks composed from :mod:`macft.engine.ops`.

Layers are stateless between calls: ``forward`` returns ``(out, cache)`` and
``backward(dout, cache)`` accumulates parameter gradients and returns the
input gradient. The same layer can therefore run several times before any
backward (the shared branch relies on this).
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .tensor import Tensor


def normal_init(rng, shape, std=0.02):
    """N(0, std^2) fp64 array; scaled in place to avoid a second full-size copy."""
    out = rng.standard_normal(shape)
    out *= std
    return out


class Module:
    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix=""):
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state, prefix="", strict=True):
        missing = []
        for name, p in self.named_parameters(prefix):
            if name not in state:
                missing.append(name)
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr
        if strict and missing:
            raise KeyError(f"missing tensors in checkpoint: {missing[:5]}{'...' if len(missing) > 5 else ''}")

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = bool(flag)
            if not flag:
                p.zero_grad()

    def any_trainable(self):
        return any(p.requires_grad for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def n_params(self):
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in, n_out, rng, std=0.02):
        self.weight = Tensor(normal_init(rng, (n_in, n_out), std), True)
        self.bias = Tensor(np.zeros(n_out), True)

    def forward(self, x):
        return ops.matmul(x, self.weight.data) + self.bias.data, x

    def backward(self, dy, x, need_input_grad=True):
        if self.weight.requires_grad:
            x2 = x.reshape(-1, x.shape[-1])
            self.weight.accumulate(x2.T @ dy.reshape(-1, dy.shape[-1]))
        if self.bias.requires_grad:
            self.bias.accumulate(dy.reshape(-1, dy.shape[-1]).sum(axis=0))
        if need_input_grad:
            return dy @ self.weight.data.T
        return None


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6):
        self.gamma = Tensor(np.ones(dim), True)
        self.beta = Tensor(np.zeros(dim), True)
        self.eps = eps

    def forward(self, x):
        return ops.layer_norm(x, self.gamma.data, self.beta.data, self.eps)

    def backward(self, dy, cache):
        dx, dg, db = ops.layer_norm_backward(dy, cache)
        self.gamma.accumulate(dg)
        self.beta.accumulate(db)
        return dx


class FeedForward(Module):
    """affine -> GELU -> affine."""

    def __init__(self, dim, hidden, rng, out_dim=None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim or dim, rng)

    def forward(self, x):
        h, c1 = self.fc1.forward(x)
        a = ops.gelu(h)
        y, c2 = self.fc2.forward(a)
        return y, (c1, h, c2)

    def backward(self, dy, cache, need_input_grad=True):
        c1, h, c2 = cache
        da = self.fc2.backward(dy, c2)
        dh = ops.gelu_backward(da, h)
        return self.fc1.backward(dh, c1, need_input_grad)


class Conv2d(Module):
    def __init__(self, cin, cout, rng, kernel=3, padding=1, stride=1, std=None):
        if std is None:
            std = math.sqrt(2.0 / (kernel * kernel * cin))
        self.weight = Tensor(normal_init(rng, (kernel, kernel, cin, cout), std), True)
        self.bias = Tensor(np.zeros(cout), True)
        self.padding = padding
        self.stride = stride

    def forward(self, x):
        return ops.conv2d(x, self.weight.data, self.bias.data, self.stride, self.padding)

    def backward(self, dy, cache):
        dx, dk, db = ops.conv2d_backward(dy, cache)
        self.weight.accumulate(dk)
        self.bias.accumulate(db)
        return dx


class MultiHeadAttention(Module):
    """Scaled dot-product attention with one fused q/k/v projection.

    The pieces (``project``, ``attend``, ``merge``) are exposed separately so
    that cross-attention can take queries from one stream and keys/values
    from another while sharing the projection weights.
    """

    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def _split(self, t):
        b, n, _ = t.shape
        return t.reshape(b, n, self.heads, -1).transpose(0, 2, 1, 3)

    def _join(self, t):
        b, h, n, d = t.shape
        return t.transpose(0, 2, 1, 3).reshape(b, n, h * d)

    def project(self, x):
        y, c = self.qkv.forward(x)
        q, k, v = np.split(y, 3, axis=-1)
        return (self._split(q), self._split(k), self._split(v)), c

    def project_backward(self, dq, dk, dv, cache):
        dy = np.concatenate([self._join(dq), self._join(dk), self._join(dv)], axis=-1)
        return self.qkv.backward(dy, cache)

    def attend(self, q, k, v):
        scale = 1.0 / math.sqrt(q.shape[-1])
        scores = ops.matmul(q, np.swapaxes(k, -1, -2)) * scale
        p = ops.softmax(scores, axis=-1)
        return ops.matmul(p, v), (q, k, v, p, scale)

    @staticmethod
    def attend_backward(dctx, cache):
        q, k, v, p, scale = cache
        dp = dctx @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(p, -1, -2) @ dctx
        ds = ops.softmax_backward(dp, p) * scale
        dq = ds @ k
        dk = np.swapaxes(ds, -1, -2) @ q
        return dq, dk, dv

    def merge(self, ctx):
        return self.proj.forward(self._join(ctx))

    def merge_backward(self, dy, cache):
        return self._split(self.proj.backward(dy, cache))

    def forward(self, x):
        """Self-attention over all tokens of ``x`` (B, N, D)."""
        (q, k, v), cp = self.project(x)
        ctx, ca = self.attend(q, k, v)
        y, cm = self.merge(ctx)
        return y, (cp, ca, cm)

    def backward(self, dy, cache):
        cp, ca, cm = cache
        dctx = self.merge_backward(dy, cm)
        dq, dk, dv = self.attend_backward(dctx, ca)
        return self.project_backward(dq, dk, dv, cp)

    @staticmethod
    def probs(cache):
        """Attention probabilities (B, heads, Nq, Nk) recorded in a forward cache."""
        return cache[1][3]
