"""Template/search crops and training-sample construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from ..boxes import CropInfo
from ..config import ModelConfig, SampleConfig


@dataclass
class RGBTSample:
    z_rgb: np.ndarray
    z_tir: np.ndarray
    x_rgb: np.ndarray
    x_tir: np.ndarray
    gt: np.ndarray            # normalised (cx, cy, w, h) in the search crop
    search_crop: CropInfo
    template_crop: CropInfo
    padded: int               # search-crop pixels sampled from outside the frame


def crop_and_resize(img, crop: CropInfo):
    """Bilinear square crop; pixels whose source lies outside the frame are 0.

    Returns ``(patch, n_padded)``.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    n = crop.out_size
    step = crop.side / n
    coords = crop.x0 + (np.arange(n) + 0.5) * step - 0.5
    rows = crop.y0 + (np.arange(n) + 0.5) * step - 0.5
    yy, xx = np.meshgrid(rows, coords, indexing="ij")
    outside = (xx < -0.5) | (xx > w - 0.5) | (yy < -0.5) | (yy > h - 0.5)
    out = np.empty((n, n, img.shape[2]))
    for c in range(img.shape[2]):
        out[..., c] = map_coordinates(img[..., c], [yy, xx], order=1, mode="nearest")
    out[outside] = 0.0
    return out, int(outside.sum())


def crop_around(box_xywh, factor, out_size, center=None, scale=1.0):
    x, y, w, h = map(float, box_xywh)
    if w < 1 or h < 1:
        raise ValueError(f"degenerate box {box_xywh}: width and height must be >= 1 px")
    cx, cy = center if center is not None else (x + w / 2, y + h / 2)
    return CropInfo(cx, cy, factor * np.sqrt(w * h) * scale, out_size)


def template_crops(rgb, tir, box, mcfg: ModelConfig, scfg: SampleConfig):
    crop = crop_around(box, scfg.template_factor, mcfg.template_size)
    return crop_and_resize(rgb, crop)[0], crop_and_resize(tir, crop)[0], crop


def make_sample(frame_pair, gt_box, template_pair, template_box, rng,
                mcfg: ModelConfig, scfg: SampleConfig, jitter=True):
    """Build one training sample.

    ``frame_pair``/``template_pair`` are (rgb, tir) frames. The search crop is
    centred on the gt centre, shifted by up to ``center_jitter`` of the crop
    side and rescaled log-uniformly in [scale_min, scale_max] when ``jitter``.
    """
    x, y, w, h = map(float, gt_box)
    if w < 1 or h < 1:
        raise ValueError(f"degenerate gt box {gt_box}: width and height must be >= 1 px")
    scale = 1.0
    cx, cy = x + w / 2, y + h / 2
    if jitter:
        scale = float(np.exp(rng.uniform(np.log(scfg.scale_min), np.log(scfg.scale_max))))
        side = scfg.search_factor * np.sqrt(w * h) * scale
        shift = rng.uniform(-scfg.center_jitter, scfg.center_jitter, size=2) * side
        cx, cy = cx + shift[0], cy + shift[1]
    search = crop_around(gt_box, scfg.search_factor, mcfg.search_size, (cx, cy), scale)
    x_rgb, padded = crop_and_resize(frame_pair[0], search)
    x_tir, _ = crop_and_resize(frame_pair[1], search)
    z_rgb, z_tir, tcrop = template_crops(template_pair[0], template_pair[1], template_box, mcfg, scfg)
    return RGBTSample(z_rgb, z_tir, x_rgb, x_tir, search.to_crop(np.asarray(gt_box, dtype=np.float64)),
                      search, tcrop, padded)


class SampleSource:
    """Draws random samples from sequences: template from frame 0, search from
    a random frame of the same sequence."""

    def __init__(self, sequences, mcfg: ModelConfig, scfg: SampleConfig):
        if not sequences:
            raise ValueError("no training sequences")
        self.sequences = sequences
        self.mcfg = mcfg
        self.scfg = scfg

    def draw(self, rng):
        seq = self.sequences[int(rng.integers(len(self.sequences)))]
        t = int(rng.integers(len(seq)))
        return make_sample((seq.rgb[t], seq.tir[t]), seq.gt[t], (seq.rgb[0], seq.tir[0]), seq.gt[0],
                           rng, self.mcfg, self.scfg)

    def batch(self, rng, size):
        samples = [self.draw(rng) for _ in range(size)]
        stack = lambda attr: np.stack([getattr(s, attr) for s in samples])
        return {"z_rgb": stack("z_rgb"), "z_tir": stack("z_tir"), "x_rgb": stack("x_rgb"),
                "x_tir": stack("x_tir"), "gt": stack("gt")}
