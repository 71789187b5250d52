"""Synthetic paired RGB/TIR sequences with analytic ground truth.

The target is a coloured square in RGB and a hot Gaussian blob in TIR, moving
on a sinusoidal path over a static textured background. Per-modality
corruption (added noise or complete blank-out) can be scheduled by frame range.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import zoom

from .sequences import SequencePair


@dataclass
class SynthConfig:
    frames: int = 30
    canvas: int = 96
    target_w: float = 14.0
    target_h: float = 14.0
    amplitude: float = 20.0
    period: float = 30.0
    size_drift: float = 0.0
    # per modality: list of (start, end, sigma) noise ranges and (start, end) blank-out ranges
    rgb_noise: list = field(default_factory=list)
    tir_noise: list = field(default_factory=list)
    rgb_blank: list = field(default_factory=list)
    tir_blank: list = field(default_factory=list)
    seed: int = 0
    name: str = "synth"

    def __post_init__(self):
        if self.frames < 1 or self.canvas < 8:
            raise ValueError("need frames >= 1 and canvas >= 8")
        for rng_list in (self.rgb_noise, self.tir_noise, self.rgb_blank, self.tir_blank):
            for item in rng_list:
                start, end = item[0], item[1]
                if not 0 <= start <= end <= self.frames:
                    raise ValueError(f"corruption range {item} outside [0, {self.frames})")


def _texture(rng, size, cells, channels):
    coarse = rng.random((cells, cells, channels))
    tex = zoom(coarse, (size / cells, size / cells, 1), order=1, mode="nearest")
    return tex[:size, :size]


def _coverage(lo, hi, n):
    """Fraction of each unit pixel [i, i+1) covered by the interval [lo, hi)."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1, hi) - np.maximum(edges, lo), 0.0, 1.0)


def _in_ranges(t, ranges):
    return [r for r in ranges if r[0] <= t < r[1]]


def trajectory(cfg: SynthConfig, rng):
    """Ground-truth boxes (T, 4) x, y, w, h and the random phases used."""
    t = np.arange(cfg.frames, dtype=np.float64)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    drift = 1.0 + cfg.size_drift * np.sin(2 * np.pi * t / max(cfg.period, 1) + phase[2])
    w = cfg.target_w * drift
    h = cfg.target_h * drift
    margin = cfg.amplitude + max(w.max(), h.max()) / 2 + 2
    lo, hi = margin, cfg.canvas - margin
    if hi < lo:
        lo = hi = cfg.canvas / 2
    c0 = rng.uniform(lo, hi, size=2)
    cx = c0[0] + cfg.amplitude * np.sin(2 * np.pi * t / cfg.period + phase[0])
    cy = c0[1] + cfg.amplitude * np.sin(2 * np.pi * t / (1.3 * cfg.period) + phase[1])
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)


def synth_sequence(cfg: SynthConfig) -> SequencePair:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.canvas
    gt = trajectory(cfg, rng)
    colour = rng.uniform(0.1, 1.0, size=3)
    colour[rng.integers(3)] = 1.0
    bg_rgb = 0.15 + 0.5 * _texture(rng, n, max(n // 8, 2), 3)
    bg_tir = 0.1 + 0.3 * _texture(rng, n, max(n // 12, 2), 1)
    yy, xx = np.mgrid[0:n, 0:n] + 0.5

    rgb = np.empty((cfg.frames, n, n, 3))
    tir = np.empty((cfg.frames, n, n, 3))
    tags = set()
    for t in range(cfg.frames):
        x, y, w, h = gt[t]
        cover = np.outer(_coverage(y, y + h, n), _coverage(x, x + w, n))[..., None]
        frame = bg_rgb * (1 - cover) + colour * cover
        frame = frame + rng.normal(0.0, 0.02, size=frame.shape)
        sx, sy = w / 4, h / 4
        blob = np.exp(-0.5 * (((xx - x - w / 2) / sx) ** 2 + ((yy - y - h / 2) / sy) ** 2))
        thermal = bg_tir[..., 0] * (1 - blob) + 0.95 * blob
        thermal = thermal + rng.normal(0.0, 0.02, size=thermal.shape)

        for _, _, sigma in _in_ranges(t, cfg.rgb_noise):
            frame = frame + rng.normal(0.0, sigma, size=frame.shape)
            tags.add("LI")
        for _, _, sigma in _in_ranges(t, cfg.tir_noise):
            thermal = thermal + rng.normal(0.0, sigma, size=thermal.shape)
            tags.add("TC")
        if _in_ranges(t, cfg.rgb_blank):
            frame = rng.uniform(0.0, 1.0, size=frame.shape)
            tags.add("LI")
        if _in_ranges(t, cfg.tir_blank):
            thermal = rng.uniform(0.0, 1.0, size=thermal.shape)
            tags.add("TC")
        # quantise to 8-bit levels so a PNG round trip is lossless
        rgb[t] = np.round(np.clip(frame, 0, 1) * 255) / 255
        tir[t] = (np.round(np.clip(thermal, 0, 1) * 255) / 255)[..., None]
    if cfg.size_drift > 0:
        tags.add("SV")
    if not tags:
        tags.add("NO")
    return SequencePair(rgb, tir, gt, name=cfg.name, tags=tuple(sorted(tags)))


def _blocks(frames, fraction, block=5, start=1):
    """Alternating clean/corrupt blocks covering ``fraction`` of frames after ``start``."""
    ranges = []
    total = int(round(frames * fraction))
    t = start + block
    while total > 0 and t < frames:
        end = min(t + block, frames, t + total)
        ranges.append((t, end))
        total -= end - t
        t = end + block
    return ranges


def synth_dataset(n_sequences, seed=0, frames=30, canvas=96, target_range=(10.0, 18.0),
                  amplitude=20.0, size_drift=0.2, corrupt="none", prefix="seq"):
    """A list of varied sequences drawn from one master seed.

    ``corrupt`` is one of ``none``; ``mixed`` (each sequence gets one blanked
    range on a random modality, frame 0 kept clean); ``rgb50`` / ``tir50``
    (that modality blanked on half the frames in alternating blocks).
    """
    if corrupt not in ("none", "mixed", "rgb50", "tir50"):
        raise ValueError(f"unknown corruption mode {corrupt!r}")
    master = np.random.default_rng(seed)
    out = []
    for i in range(n_sequences):
        s = int(master.integers(2**31))
        size = master.uniform(*target_range)
        aspect = master.uniform(0.75, 1.33)
        cfg = SynthConfig(frames=frames, canvas=canvas, target_w=size * np.sqrt(aspect),
                          target_h=size / np.sqrt(aspect), amplitude=amplitude * master.uniform(0.3, 1.0),
                          period=master.uniform(0.8, 1.6) * frames, size_drift=size_drift * master.uniform(),
                          seed=s, name=f"{prefix}{i:03d}")
        if corrupt == "mixed":
            length = max(1, int(round(frames * master.uniform(0.2, 0.5))))
            start = int(master.integers(1, max(2, frames - length + 1)))
            rng_ = [(start, min(frames, start + length))]
            cfg = replace(cfg, rgb_blank=rng_) if master.random() < 0.5 else replace(cfg, tir_blank=rng_)
        elif corrupt == "rgb50":
            cfg = replace(cfg, rgb_blank=_blocks(frames, 0.5, start=0))
        elif corrupt == "tir50":
            cfg = replace(cfg, tir_blank=_blocks(frames, 0.5, start=0))
        out.append(synth_sequence(cfg))
    return out
