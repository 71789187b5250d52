"""Box formats and the crop <-> image coordinate transform."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixels: top-left corner plus extent."""

    x: float
    y: float
    w: float
    h: float

    @property
    def cx(self):
        return self.x + self.w / 2

    @property
    def cy(self):
        return self.y + self.h / 2

    def as_array(self):
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64).reshape(4)
        return cls(*map(float, a))


@dataclass(frozen=True)
class CropInfo:
    """Square crop of side ``side`` centred at (cx, cy), resized to ``out_size``."""

    cx: float
    cy: float
    side: float
    out_size: int

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError(f"crop side must be positive, got {self.side}")

    @property
    def resize_factor(self):
        return self.out_size / self.side

    @property
    def x0(self):
        return self.cx - self.side / 2

    @property
    def y0(self):
        return self.cy - self.side / 2

    def to_crop(self, box_xywh):
        """Image-space ``(x, y, w, h)`` -> normalised crop ``(cx, cy, w, h)``."""
        b = np.asarray(box_xywh, dtype=np.float64)
        out = np.empty_like(b)
        out[..., 0] = (b[..., 0] + b[..., 2] / 2 - self.x0) / self.side
        out[..., 1] = (b[..., 1] + b[..., 3] / 2 - self.y0) / self.side
        out[..., 2] = b[..., 2] / self.side
        out[..., 3] = b[..., 3] / self.side
        return out

    def from_crop(self, box_cxcywh):
        """Normalised crop ``(cx, cy, w, h)`` -> image-space ``(x, y, w, h)``."""
        b = np.asarray(box_cxcywh, dtype=np.float64)
        out = np.empty_like(b)
        out[..., 2] = b[..., 2] * self.side
        out[..., 3] = b[..., 3] * self.side
        out[..., 0] = self.x0 + b[..., 0] * self.side - out[..., 2] / 2
        out[..., 1] = self.y0 + b[..., 1] * self.side - out[..., 3] / 2
        return out


def xywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2], b[..., :2] + b[..., 2:]], axis=-1)


def xyxy_to_xywh(b):
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2], b[..., 2:] - b[..., :2]], axis=-1)


def xyxy_to_cxcywh(b):
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def cxcywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xywh_to_cxcywh(b):
    return xyxy_to_cxcywh(xywh_to_xyxy(b))


def cxcywh_to_xywh(b):
    return xyxy_to_xywh(cxcywh_to_xyxy(b))


# xyxy -> cxcywh is linear; this is its Jacobian transpose applied to a gradient
def cxcywh_grad_to_xyxy(d):
    d = np.asarray(d)
    dx1 = 0.5 * d[..., 0] - d[..., 2]
    dy1 = 0.5 * d[..., 1] - d[..., 3]
    dx2 = 0.5 * d[..., 0] + d[..., 2]
    dy2 = 0.5 * d[..., 1] + d[..., 3]
    return np.stack([dx1, dy1, dx2, dy2], axis=-1)


def clip_box(box_xywh, width, height, min_size=1.0):
    """Keep a predicted box inside the frame with at least ``min_size`` extent."""
    x, y, w, h = map(float, box_xywh)
    x1, y1 = max(0.0, x), max(0.0, y)
    x2, y2 = min(float(width), x + w), min(float(height), y + h)
    if x2 - x1 < min_size:
        c = min(max((x1 + x2) / 2, min_size / 2), width - min_size / 2)
        x1, x2 = c - min_size / 2, c + min_size / 2
    if y2 - y1 < min_size:
        c = min(max((y1 + y2) / 2, min_size / 2), height - min_size / 2)
        y1, y2 = c - min_size / 2, c + min_size / 2
    return np.array([x1, y1, max(x2 - x1, min_size), max(y2 - y1, min_size)])
