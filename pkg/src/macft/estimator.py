"""scikit-learn style wrapper around the three-stage tracker."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import VARIANTS, RunConfig
from .metrics import iou
from .pipeline.experiment import init_rng, run_pipeline
from .pipeline.sampling import SampleSource
from .pipeline.tracking import track_sequence
from .model import build_variant
from .validation import check_sequences


class MACFTTracker(BaseEstimator):
    """Fit on paired RGB/TIR sequences, predict one box trace per sequence.

    ``fit`` runs every training stage the variant needs; ``predict`` tracks
    from each sequence's first-frame box; ``score`` is the mean frame IoU.
    """

    def __init__(self, variant="full", search_size=32, template_size=16, patch=4, dim=32,
                 depth=3, heads=4, freeze=1, mam_depth=6, stage1_epochs=2, stage2_epochs=2,
                 stage3_epochs=2, samples_per_epoch=512, batch_size=16, lr_backbone=5e-4,
                 lr_rest=1e-3, seed=0):
        self.variant = variant
        self.search_size = search_size
        self.template_size = template_size
        self.patch = patch
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.freeze = freeze
        self.mam_depth = mam_depth
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.stage3_epochs = stage3_epochs
        self.samples_per_epoch = samples_per_epoch
        self.batch_size = batch_size
        self.lr_backbone = lr_backbone
        self.lr_rest = lr_rest
        self.seed = seed

    def run_config(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        run = RunConfig()
        for key in ("variant", "search_size", "template_size", "patch", "dim", "depth", "heads",
                    "freeze", "mam_depth"):
            run.set(f"model.{key}", getattr(self, key))
        for st in (1, 2, 3):
            run.set(f"train.stage{st}.epochs", getattr(self, f"stage{st}_epochs"))
        for key in ("samples_per_epoch", "batch_size", "lr_backbone", "lr_rest"):
            run.set(f"train.{key}", getattr(self, key))
        run.set("seed", self.seed)
        run.model_config()
        return run

    def fit(self, X, y=None):
        seqs = check_sequences(X)
        run = self.run_config()
        self.config_ = run
        self.model_ = build_variant(self.variant, run.model_config(), init_rng(self.seed))
        source = SampleSource(seqs, run.model_config(), run.sample_config())
        self.loss_trace_ = run_pipeline(self.model_, run, source)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        scfg = self.config_.sample_config()
        return [track_sequence(self.model_, s, scfg) for s in check_sequences(X)]

    def score(self, X, y=None):
        seqs = check_sequences(X)
        preds = self.predict(seqs)
        return float(np.mean(np.concatenate([np.atleast_1d(iou(p, s.gt)) for p, s in zip(preds, seqs)])))
