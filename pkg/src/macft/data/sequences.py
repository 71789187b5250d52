"""Paired RGB/TIR sequences and their on-disk layout.

A sequence directory holds ``rgb/`` and ``tir/`` image folders (8-bit PNG or
PGM, sorted by filename), ``gt.txt`` with one ``x,y,w,h`` line per frame and an
optional ``attributes.json`` (a list of tag strings).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".jpg", ".jpeg", ".bmp")
ATTRIBUTES = ("NO", "PO", "HO", "LI", "LR", "TC", "DEF", "FM", "SV", "MB", "CM", "BC")


class SequenceFormatError(ValueError):
    pass


@dataclass
class SequencePair:
    rgb: np.ndarray          # (T, H, W, 3) in [0, 1]
    tir: np.ndarray          # (T, H, W, 3), single band replicated
    gt: np.ndarray           # (T, 4) x, y, w, h in pixels
    name: str = "seq"
    tags: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.gt = np.asarray(self.gt, dtype=np.float64).reshape(-1, 4)
        if len(self.rgb) != len(self.tir):
            raise SequenceFormatError(
                f"{self.name}: {len(self.rgb)} RGB frames but {len(self.tir)} TIR frames")
        if len(self.gt) != len(self.rgb):
            raise SequenceFormatError(
                f"{self.name}: {len(self.gt)} gt boxes for {len(self.rgb)} frames")
        if len(self.rgb) and self.rgb.shape[1:3] != self.tir.shape[1:3]:
            raise SequenceFormatError(f"{self.name}: RGB and TIR frame sizes differ")

    def __len__(self):
        return len(self.gt)

    @property
    def frame_size(self):
        """(height, width)."""
        return self.rgb.shape[1:3]


def load_image(path):
    """8-bit image -> float array in [0, 1], always three channels."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    arr = arr.astype(np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return arr


def _to_uint8(img):
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def parse_gt(text, source="gt.txt"):
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.replace("\t", ",").replace(" ", ",").split(",")
        parts = [p for p in parts if p]
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise SequenceFormatError(f"{source}:{lineno}: cannot parse {line!r}") from None
        if len(vals) != 4:
            raise SequenceFormatError(f"{source}:{lineno}: expected 4 values, got {len(vals)}")
        boxes.append(vals)
    return np.array(boxes, dtype=np.float64).reshape(-1, 4)


def _frame_files(folder):
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_sequence(path):
    path = Path(path)
    rgb_dir, tir_dir, gt_path = path / "rgb", path / "tir", path / "gt.txt"
    for p in (rgb_dir, tir_dir, gt_path):
        if not p.exists():
            raise SequenceFormatError(f"{path}: missing {p.name}")
    rgb_files, tir_files = _frame_files(rgb_dir), _frame_files(tir_dir)
    gt = parse_gt(gt_path.read_text(), str(gt_path))
    if len(rgb_files) != len(tir_files):
        rgb_names = [f.stem for f in rgb_files]
        tir_names = [f.stem for f in tir_files]
        n = min(len(rgb_names), len(tir_names))
        gap = next((i for i in range(n) if rgb_names[i] != tir_names[i]), n)
        raise SequenceFormatError(
            f"{path}: {len(rgb_files)} RGB vs {len(tir_files)} TIR frames (first gap at index {gap})")
    if len(gt) != len(rgb_files):
        raise SequenceFormatError(f"{path}: {len(gt)} gt lines for {len(rgb_files)} frames")
    tags = ()
    attr = path / "attributes.json"
    if attr.exists():
        tags = tuple(json.loads(attr.read_text()))
    rgb = np.stack([load_image(f) for f in rgb_files]) if rgb_files else np.zeros((0, 1, 1, 3))
    tir = np.stack([load_image(f) for f in tir_files]) if tir_files else np.zeros((0, 1, 1, 3))
    return SequencePair(rgb, tir, gt, name=path.name, tags=tags)


def load_dataset(path):
    """Every sequence subdirectory of ``path``, sorted by name."""
    path = Path(path)
    dirs = sorted(p for p in path.iterdir() if (p / "gt.txt").exists())
    if not dirs:
        raise SequenceFormatError(f"{path}: no sequence directories found")
    return [load_sequence(d) for d in dirs]


def format_box(b):
    return ",".join(repr(float(v)) if not float(v).is_integer() else str(int(v)) for v in b)


def write_sequence(seq: SequencePair, path):
    """Write ``seq`` in the directory layout read by :func:`load_sequence`."""
    path = Path(path)
    (path / "rgb").mkdir(parents=True, exist_ok=True)
    (path / "tir").mkdir(parents=True, exist_ok=True)
    for i in range(len(seq)):
        Image.fromarray(_to_uint8(seq.rgb[i]), "RGB").save(path / "rgb" / f"{i:05d}.png")
        Image.fromarray(_to_uint8(seq.tir[i][..., 0]), "L").save(path / "tir" / f"{i:05d}.png")
    (path / "gt.txt").write_text("".join(format_box(b) + "\n" for b in seq.gt))
    if seq.tags:
        (path / "attributes.json").write_text(json.dumps(list(seq.tags)) + "\n")


def write_dataset(seqs, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for s in seqs:
        write_sequence(s, path / s.name)
