"""Box regression losses and their stagewise composition.

All boxes are normalised crop coordinates in ``(cx, cy, w, h)`` form with
arbitrary leading batch axes. Functions return per-box values; with
``return_grad`` they also return the gradient w.r.t. the prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import cxcywh_to_xyxy
from .engine.tensor import check_finite


@dataclass(frozen=True)
class LossWeights:
    giou: float = 2.0
    l1: float = 5.0
    kl: float = 800.0

    def __post_init__(self):
        if min(self.giou, self.l1, self.kl) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


def _scalarize(x):
    return float(x) if np.ndim(x) == 0 else x


def l1_box_loss(b, b_star, return_grad=False):
    """Mean absolute difference over the four coordinates."""
    b = np.asarray(b, dtype=np.float64)
    t = np.asarray(b_star, dtype=np.float64)
    diff = b - t
    loss = np.abs(diff).mean(axis=-1)
    if not return_grad:
        return _scalarize(loss)
    return _scalarize(loss), np.sign(diff) / 4.0


def giou_loss(b, b_star, return_grad=False):
    """1 - GIoU with GIoU = IoU - (|C| - |U|) / |C|, C the enclosing box."""
    b = np.asarray(b, dtype=np.float64)
    t = np.asarray(b_star, dtype=np.float64)
    if (b[..., 2:] <= 0).any() or (t[..., 2:] <= 0).any():
        raise ValueError("giou_loss needs boxes with positive width and height")
    p = cxcywh_to_xyxy(b)
    g = cxcywh_to_xyxy(t)
    px1, py1, px2, py2 = np.moveaxis(p, -1, 0)
    gx1, gy1, gx2, gy2 = np.moveaxis(g, -1, 0)

    ix1, iy1 = np.maximum(px1, gx1), np.maximum(py1, gy1)
    ix2, iy2 = np.minimum(px2, gx2), np.minimum(py2, gy2)
    iw_raw, ih_raw = ix2 - ix1, iy2 - iy1
    iw, ih = np.maximum(iw_raw, 0.0), np.maximum(ih_raw, 0.0)
    inter = iw * ih
    pw, ph = px2 - px1, py2 - py1
    area_p = pw * ph
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    cw = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    ch = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    area_c = cw * ch
    iou = inter / union
    loss = 2.0 - iou - union / area_c
    check_finite(loss, "GIoU loss")
    if not return_grad:
        return _scalarize(loss)

    # loss = 2 - I/U - U/C with U = A_p + A_g - I
    dU = inter / union**2 - 1.0 / area_c
    dI = -1.0 / union - dU
    dC = union / area_c**2
    dA_p = dU

    on_w = (iw_raw > 0).astype(np.float64)
    on_h = (ih_raw > 0).astype(np.float64)
    d_iw = dI * ih * on_w
    d_ih = dI * iw * on_h
    d_cw = dC * ch
    d_ch = dC * cw

    dpx1 = -dA_p * ph - d_iw * (px1 > gx1) - d_cw * (px1 < gx1)
    dpx2 = dA_p * ph + d_iw * (px2 < gx2) + d_cw * (px2 > gx2)
    dpy1 = -dA_p * pw - d_ih * (py1 > gy1) - d_ch * (py1 < gy1)
    dpy2 = dA_p * pw + d_ih * (py2 < gy2) + d_ch * (py2 > gy2)

    grad = np.stack([
        dpx1 + dpx2,
        dpy1 + dpy2,
        0.5 * (dpx2 - dpx1),
        0.5 * (dpy2 - dpy1),
    ], axis=-1)
    return _scalarize(loss), grad


def composite_loss_stage13(b, b_star, w: LossWeights, return_grad=False):
    """lambda_giou * L_giou + lambda_l1 * L_1, per box."""
    if not return_grad:
        return w.giou * giou_loss(b, b_star) + w.l1 * l1_box_loss(b, b_star)
    lg, gg = giou_loss(b, b_star, True)
    ll, gl = l1_box_loss(b, b_star, True)
    return w.giou * lg + w.l1 * ll, w.giou * gg + w.l1 * gl


def min_modality_loss(l_v, l_t, l_div, w: LossWeights):
    """Per-sample min of two precomputed modality losses plus lambda_kl * L_div.

    Returns ``(total, pick_v)``; ties pick RGB.
    """
    l_v, l_t = np.asarray(l_v, dtype=np.float64), np.asarray(l_t, dtype=np.float64)
    pick_v = np.asarray(l_v <= l_t)
    return np.where(pick_v, l_v, l_t) + w.kl * l_div, pick_v


def composite_loss_stage2(b_v, b_v_star, b_t, b_t_star, l_div, w: LossWeights, return_grad=False):
    """min(box loss on RGB, box loss on TIR) + lambda_kl * L_div, per sample.

    Ties go to the RGB prediction (it receives the gradient).
    """
    if not return_grad:
        lv = composite_loss_stage13(b_v, b_v_star, w)
        lt = composite_loss_stage13(b_t, b_t_star, w)
        return _scalarize(min_modality_loss(lv, lt, l_div, w)[0])
    lv, gv = composite_loss_stage13(b_v, b_v_star, w, True)
    lt, gt = composite_loss_stage13(b_t, b_t_star, w, True)
    total, pick_v = min_modality_loss(lv, lt, l_div, w)
    gv = np.where(pick_v[..., None], gv, 0.0)
    gt = np.where(pick_v[..., None], 0.0, gt)
    return _scalarize(total), gv, gt, pick_v
