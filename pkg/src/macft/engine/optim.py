"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import check_finite


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state):
    """One in-place AdamW update of the arrays in ``params``.

    Decay is applied to the parameter directly (``p -= lr * wd * p``), then the
    bias-corrected Adam step. Moment buffers are created on the first call.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if state.lr <= 0:
        raise ValueError(f"learning rate must be positive, got {state.lr}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        check_finite(g, "gradient")
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


class AdamW:
    """Optimizer over named :class:`Tensor` groups, each with its own lr.

    Only tensors with ``requires_grad`` are ever touched, so frozen groups stay
    bit-identical no matter how many steps run.
    """

    def __init__(self, groups, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.groups = []
        for tensors, lr in groups:
            tensors = [t for t in tensors if t.requires_grad]
            state = OptimizerState(lr=lr, weight_decay=weight_decay,
                                   beta1=betas[0], beta2=betas[1], eps=eps)
            self.groups.append((tensors, state))

    def zero_grad(self):
        for tensors, _ in self.groups:
            for t in tensors:
                t.zero_grad()

    def step(self):
        for tensors, state in self.groups:
            if not tensors:
                continue
            grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
            adamw_step([t.data for t in tensors], grads, state)
