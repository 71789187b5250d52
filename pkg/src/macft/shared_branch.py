"""Modal-shared branch and the feature-consistency KL loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, BranchFeatures
from .engine import ops
from .engine.tensor import check_finite

KL_FLOOR = 1e-12


@dataclass
class SharedFeatures:
    g_rgb: BranchFeatures
    g_tir: BranchFeatures

    @property
    def p_rgb(self):
        return ops.softmax(self.g_rgb.tokens, axis=-1)

    @property
    def p_tir(self):
        return ops.softmax(self.g_tir.tokens, axis=-1)


def forward_shared(backbone: Backbone, rgb_pair, tir_pair, record_attention=False):
    """Pass the RGB pair and the TIR pair through the same parameters.

    Each pair is ``(template, search)``. Returns ``(SharedFeatures, caches)``.
    """
    for a, b in zip(rgb_pair, tir_pair):
        if np.shape(a) != np.shape(b):
            raise ValueError(f"modality geometry mismatch: {np.shape(a)} vs {np.shape(b)}")
    g_v, c_v = backbone.forward(*rgb_pair, record_attention=record_attention)
    g_t, c_t = backbone.forward(*tir_pair, record_attention=record_attention)
    return SharedFeatures(g_v, g_t), (c_v, c_t)


def kl_divergence_loss(g_v, g_t, return_grad=False):
    """Mean over token rows of KL(softmax(g_v) || softmax(g_t)), in nats.

    Softmax runs along the feature axis of each token; leading batch axes are
    averaged together with the tokens. ``p_t`` is floored at 1e-12 before the
    log. With ``return_grad`` the gradients w.r.t. both inputs are returned too.
    """
    g_v = check_finite(np.asarray(g_v, dtype=np.float64), "KL input")
    g_t = check_finite(np.asarray(g_t, dtype=np.float64), "KL input")
    if g_v.shape != g_t.shape:
        raise ValueError(f"KL inputs differ in shape: {g_v.shape} vs {g_t.shape}")
    log_p = ops.log_softmax(g_v, axis=-1)
    p = np.exp(log_p)
    q = ops.softmax(g_t, axis=-1)
    clamped = q < KL_FLOOR
    log_q = np.log(np.maximum(q, KL_FLOOR))
    r = log_p - log_q
    rows = (p * r).sum(axis=-1)
    n_rows = rows.size
    loss = float(check_finite(rows.mean(), "KL loss"))
    if not return_grad:
        return loss
    # d/dg_v: p * (r - KL_row); d/dg_t through the (unclamped) log q
    d_gv = p * (r - rows[..., None]) / n_rows
    dq = np.where(clamped, 0.0, -p / np.maximum(q, KL_FLOOR)) / n_rows
    d_gt = ops.softmax_backward(dq, q, axis=-1)
    return loss, d_gv, d_gt


def kl_from_probs(p, q):
    """KL(p || q) per row for explicit probability vectors (test fixtures)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), KL_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / q), 0.0)
    return terms.sum(axis=-1)
