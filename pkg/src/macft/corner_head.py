"""Corner predictor: two conv stacks, soft-argmax, back-projection."""

from __future__ import annotations

import numpy as np

from .boxes import BoundingBox, CropInfo, xyxy_to_cxcywh
from .engine import ops
from .engine.nn import Conv2d, Module

MIN_EXTENT = 1e-3


def grid_side(n_tokens):
    s = int(round(np.sqrt(n_tokens)))
    if s * s != n_tokens:
        raise ValueError(f"{n_tokens} tokens do not form a square grid")
    return s


def soft_argmax(score_map):
    """Softmax over all S*S cells, then the expected normalised cell centre.

    ``score_map`` is ``(…, S, S)`` (rows are y). Returns ``((…, 2) xy, cache)``.
    """
    m = np.asarray(score_map, dtype=np.float64)
    *lead, sh, sw = m.shape
    p = ops.softmax(m.reshape(*lead, sh * sw), axis=-1)
    u = np.tile((np.arange(sw) + 0.5) / sw, sh)
    v = np.repeat((np.arange(sh) + 0.5) / sh, sw)
    xy = np.stack([p @ u, p @ v], axis=-1)
    return xy, (p, u, v, m.shape)


def soft_argmax_backward(dxy, cache):
    p, u, v, shape = cache
    dflat = dxy[..., :1] * u + dxy[..., 1:2] * v
    return ops.softmax_backward(dflat, p, axis=-1).reshape(shape)


class CornerHead(Module):
    """Two five-layer 3x3 conv stacks (C -> C/2 -> C/4 -> C/8 -> C/16 -> 1) at
    grid resolution, one for the top-left corner and one for bottom-right."""

    def __init__(self, channels, rng):
        widths = [channels, channels // 2, channels // 4, channels // 8, channels // 16, 1]
        if min(widths) < 1:
            raise ValueError(f"corner head needs channels >= 16, got {channels}")
        self.tl = [Conv2d(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.br = [Conv2d(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    @staticmethod
    def _stack_forward(convs, x):
        caches = []
        for i, conv in enumerate(convs):
            h, c = conv.forward(x)
            last = i == len(convs) - 1
            x = h if last else ops.gelu(h)
            caches.append((c, None if last else h))
        return x[..., 0], caches

    @staticmethod
    def _stack_backward(convs, d, caches):
        d = d[..., None]
        for conv, (c, pre) in zip(reversed(convs), reversed(caches)):
            if pre is not None:
                d = ops.gelu_backward(d, pre)
            d = conv.backward(d, c)
        return d

    def heatmaps(self, feat):
        """``(B, N_x, C)`` -> top-left and bottom-right score maps ``(B, S, S)``."""
        feat = np.asarray(feat, dtype=np.float64)
        b, n, c = feat.shape
        s = grid_side(n)
        x = feat.reshape(b, s, s, c)
        tl, ctl = self._stack_forward(self.tl, x)
        br, cbr = self._stack_forward(self.br, x)
        return (tl, br), (ctl, cbr, feat.shape)

    def forward(self, feat):
        """Return normalised corners ``(B, 4)`` as (x1, y1, x2, y2) plus cache."""
        (tl, br), ch = self.heatmaps(feat)
        p1, c1 = soft_argmax(tl)
        p2, c2 = soft_argmax(br)
        return np.concatenate([p1, p2], axis=-1), (ch, c1, c2)

    def backward(self, dcorners, cache):
        (ctl, cbr, shape), c1, c2 = cache
        dtl = soft_argmax_backward(dcorners[..., :2], c1)
        dbr = soft_argmax_backward(dcorners[..., 2:], c2)
        dx = self._stack_backward(self.tl, dtl, ctl) + self._stack_backward(self.br, dbr, cbr)
        return dx.reshape(shape)


def corner_heatmaps(feat, head: CornerHead):
    return head.heatmaps(feat)[0]


def repair_corners(xyxy, min_extent=MIN_EXTENT):
    """Replace inverted/degenerate corners by a minimal box at their midpoint."""
    b = np.array(xyxy, dtype=np.float64)
    for lo, hi in ((0, 2), (1, 3)):
        bad = b[..., hi] - b[..., lo] <= 0
        mid = (b[..., lo] + b[..., hi]) / 2
        b[..., lo] = np.where(bad, mid - min_extent / 2, b[..., lo])
        b[..., hi] = np.where(bad, mid + min_extent / 2, b[..., hi])
    return b


def corners_to_box(xyxy, crop: CropInfo):
    """Normalised crop corners -> image-space ``BoundingBox`` (with repair)."""
    cxcywh = xyxy_to_cxcywh(repair_corners(xyxy))
    return BoundingBox.from_array(crop.from_crop(cxcywh))


def predict_box(feat, crop: CropInfo, head: CornerHead):
    """Fused ``(N_x, C)`` or ``(1, N_x, C)`` features -> image-space box."""
    feat = np.asarray(feat)
    if feat.ndim == 2:
        feat = feat[None]
    corners, _ = head.forward(feat)
    return corners_to_box(corners[0], crop)
