"""Offline-trained inference loop: crop, forward, back-project."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..boxes import clip_box
from ..config import SampleConfig
from ..corner_head import corners_to_box
from ..model import MACFTModel
from .sampling import crop_and_resize, crop_around, template_crops


@dataclass
class TrackerState:
    z_rgb: np.ndarray
    z_tir: np.ndarray
    box: np.ndarray          # previous prediction, x y w h
    model: MACFTModel

    @classmethod
    def initialize(cls, model, rgb0, tir0, box0, scfg: SampleConfig):
        z_rgb, z_tir, _ = template_crops(rgb0, tir0, box0, model.cfg, scfg)
        return cls(z_rgb, z_tir, np.asarray(box0, dtype=np.float64).copy(), model)


def track_step(state: TrackerState, rgb, tir, scfg: SampleConfig):
    crop = crop_around(state.box, scfg.search_factor, state.model.cfg.search_size)
    x_rgb, _ = crop_and_resize(rgb, crop)
    x_tir, _ = crop_and_resize(tir, crop)
    corners = state.model.predict_corners(state.z_rgb[None], x_rgb[None], state.z_tir[None], x_tir[None])
    box = corners_to_box(corners[0], crop).as_array()
    h, w = rgb.shape[:2]
    state.box = clip_box(box, w, h)
    return state.box.copy()


def track_sequence(model: MACFTModel, seq, scfg: SampleConfig):
    """Predict a box for every frame; frame 0's gt only seeds the template.

    The template is never updated and nothing but the coordinate transform
    follows the forward pass.
    """
    if len(seq) == 0:
        raise ValueError(f"sequence {seq.name!r} is empty")
    state = TrackerState.initialize(model, seq.rgb[0], seq.tir[0], seq.gt[0], scfg)
    return np.stack([track_step(state, seq.rgb[t], seq.tir[t], scfg) for t in range(len(seq))])
