"""End-to-end runs: full pipeline training, evaluation, ablations, K sweep.

Training streams are keyed by (seed, stage, phase) and component inits by
(seed, component), so a branch trained for one variant is bit-identical to
the same branch trained for any other. Ablations exploit this: stages 1 and 2
run once and only the per-variant stage 3 is repeated.
"""

from __future__ import annotations

import csv
import logging

import numpy as np

from ..config import RunConfig
from ..data.synth import synth_dataset
from ..metrics import iou, summary
from ..model import _LAYOUT, MACFTModel, build_variant
from .sampling import SampleSource
from .tracking import track_sequence
from .training import train_stage

log = logging.getLogger(__name__)

TEST_SEED_OFFSET = 1_000_003


def init_rng(seed):
    return np.random.default_rng([int(seed), 0])


def synth_from_config(run: RunConfig, split="train", corrupt=None):
    """Synthetic train or held-out test set described by the ``synth.*`` keys."""
    v = run.values
    n = v["synth.sequences"] if split == "train" else v["synth.test_sequences"]
    seed = v["seed"] if split == "train" else v["seed"] + TEST_SEED_OFFSET
    return synth_dataset(n, seed=seed, frames=v["synth.frames"], canvas=v["synth.canvas"],
                         target_range=(v["synth.target_min"], v["synth.target_max"]),
                         amplitude=v["synth.amplitude"], size_drift=v["synth.size_drift"],
                         corrupt=corrupt or v["synth.corrupt"], prefix=split)


def run_pipeline(model: MACFTModel, run: RunConfig, source, on_stage=None, trace=None):
    """Train every stage the model's variant needs, in order.

    ``on_stage(stage, model)`` runs after each stage (checkpointing hook).
    Stages already in ``model.stages_done`` are skipped.
    """
    trace = [] if trace is None else trace
    for stage in model.required_stages():
        if stage in model.stages_done:
            continue
        train_stage(model, run.stage_config(stage), source, run["seed"], trace)
        if on_stage is not None:
            on_stage(stage, model)
    return trace


def evaluate(model, sequences, scfg):
    """Track every sequence; returns name -> (preds, gts, tags)."""
    return {s.name: (track_sequence(model, s, scfg), s.gt, s.tags) for s in sequences}


def mean_iou(results):
    return float(np.mean(np.concatenate([np.atleast_1d(iou(p, g)) for p, g, _ in results.values()])))


def _copy_components(src: MACFTModel, dst: MACFTModel):
    state = src.state_dict()
    wanted = {name for name, _ in dst.named_parameters()}
    dst.load_state_dict({k: state[k] for k in wanted}, strict=True)


class StageCache:
    """Stage-1/2 results shared by every variant trained with one recipe."""

    def __init__(self, run: RunConfig, source):
        self.run = run
        self.source = source
        self.base = build_variant("full", run.model_config(), init_rng(run["seed"]))
        self.trace = []

    def backbones(self, need_shared):
        for stage in (1, 2) if need_shared else (1,):
            if stage not in self.base.stages_done:
                train_stage(self.base, self.run.stage_config(stage), self.source, self.run["seed"], self.trace)
        return self.base

    def variant(self, name, **model_kw):
        """A variant with its backbones (and stage heads) taken from the cache."""
        cfg = self.run.model_config().replace(variant=name, **model_kw)
        model = MACFTModel(cfg, init_rng(self.run["seed"]))
        base = self.backbones(_LAYOUT[name][2])
        donor = {k: v for k, v in base.state_dict().items() if k != "__stages__"}
        own = dict(model.state_dict())
        for k in own:
            if k in donor and not k.startswith(("fusion.", "head.")):
                own[k] = donor[k]
        model.load_state_dict(own)
        model.stages_done = {s for s in model.required_stages() if s in (1, 2)}
        return model


def ablate(variants, run: RunConfig, train_seqs, test_sets, cache=None):
    """Train each variant with the same seeded recipe and score it.

    ``test_sets`` maps a label to a list of sequences. Returns one row per
    (variant, test set) with the summary metrics.
    """
    cache = cache or StageCache(run, SampleSource(train_seqs, run.model_config(), run.sample_config()))
    scfg = run.sample_config()
    rows = []
    for name in variants:
        model = cache.variant(name)
        if model.uses_fusion:
            train_stage(model, run.stage_config(3), cache.source, run["seed"])
        for label, seqs in test_sets.items():
            res = evaluate(model, seqs, scfg)
            m = summary(np.concatenate([p for p, _, _ in res.values()]),
                        np.concatenate([g for _, g, _ in res.values()]))
            rows.append({"variant": name, "test_set": label, **m})
            log.info("%s on %s: mean IoU %.3f PR@20 %.3f", name, label, m["mean_iou"], m["pr20"])
    return rows


def sweep_mam(ks, run: RunConfig, train_seqs, test_seqs, cache=None):
    """Train the full variant for each MAM depth K; one metrics row per K."""
    cache = cache or StageCache(run, SampleSource(train_seqs, run.model_config(), run.sample_config()))
    scfg = run.sample_config()
    rows = []
    for k in ks:
        model = cache.variant("full", mam_depth=int(k))
        train_stage(model, run.stage_config(3), cache.source, run["seed"])
        res = evaluate(model, test_seqs, scfg)
        m = summary(np.concatenate([p for p, _, _ in res.values()]),
                    np.concatenate([g for _, g, _ in res.values()]))
        rows.append({"k": int(k), **m})
        log.info("K=%d: PR@20 %.3f SR %.3f", k, m["pr20"], m["sr_auc"])
    return rows


def write_rows(rows, path, fields):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k]) for k in fields})
