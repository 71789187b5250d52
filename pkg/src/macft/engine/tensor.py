"""Dense fp64 parameter tensors with gradient buffers."""

from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised whenever a NaN or Inf shows up in data, gradients or losses."""


def check_finite(arr, what="array"):
    arr = np.asarray(arr)
    if not np.isfinite(arr).all():
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{what} contains {bad} non-finite value(s)")
    return arr


class Tensor:
    """A named fp64 array plus an optional gradient buffer.

    The gradient buffer is allocated on first accumulation so that frozen
    full-scale models do not pay for buffers they never use.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.array(data, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1)
        check_finite(data, f"tensor {name or ''}".strip())
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(name={self.name!r}, shape={self.shape}{flag})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        """Add ``g`` into the gradient buffer (no-op for frozen tensors)."""
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match tensor {self.name} {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g
