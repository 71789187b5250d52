"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .data.sequences import SequencePair


def check_sequences(X, name="X"):
    """Accept one SequencePair or a non-empty list of them; always return a list."""
    if isinstance(X, SequencePair):
        X = [X]
    try:
        seqs = list(X)
    except TypeError:
        raise TypeError(f"{name} must be a SequencePair or a list of them, got {type(X).__name__}") from None
    if not seqs:
        raise ValueError(f"{name} is empty")
    for i, s in enumerate(seqs):
        if not isinstance(s, SequencePair):
            raise TypeError(f"{name}[{i}] is {type(s).__name__}, expected SequencePair")
        if len(s) == 0:
            raise ValueError(f"{name}[{i}] ({s.name}) has no frames")
        check_boxes(s.gt, f"{s.name} gt")
    return seqs


def check_boxes(boxes, what="boxes"):
    b = np.asarray(boxes, dtype=np.float64)
    if b.ndim != 2 or b.shape[1] != 4:
        raise ValueError(f"{what}: expected shape (N, 4), got {b.shape}")
    if not np.all(np.isfinite(b)):
        raise ValueError(f"{what}: non-finite coordinates")
    if np.any(b[:, 2:] <= 0):
        raise ValueError(f"{what}: widths and heights must be positive")
    return b
