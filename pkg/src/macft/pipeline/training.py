"""Three-stage training.

Stage 1 trains each modal-specific branch with its own corner head (RGB then
TIR). Stage 2 trains the shared branch on both modalities with the min-of-two
box loss plus the KL consistency term. Stage 3 freezes every backbone and
trains the fusion network and its head.
"""

from __future__ import annotations

import csv
import logging

import numpy as np

from ..backbone import set_trainable
from ..boxes import cxcywh_grad_to_xyxy, xyxy_to_cxcywh
from ..config import StageConfig
from ..engine.optim import AdamW
from ..engine.tensor import check_finite
from ..model import MACFTModel, _pad_template_rows
from ..objectives import LossWeights, giou_loss, l1_box_loss, min_modality_loss
from ..shared_branch import kl_divergence_loss

log = logging.getLogger(__name__)


PHASE_IDS = {"rgb": 0, "tir": 1, "shared": 2, "fusion": 3}


def phase_rng(seed, stage, phase):
    """Sampling stream of one training phase, independent of the other phases."""
    return np.random.default_rng([int(seed), stage, PHASE_IDS[phase]])


class PrerequisiteError(RuntimeError):
    """A stage was requested before the stages it builds on."""


def order_corners(corners):
    """Sort each corner pair so x1 <= x2 and y1 <= y2; returns (xyxy, swapped)."""
    c = np.asarray(corners)
    swap = np.stack([c[..., 0] > c[..., 2], c[..., 1] > c[..., 3]], axis=-1)
    lo = np.minimum(c[..., :2], c[..., 2:])
    hi = np.maximum(c[..., :2], c[..., 2:])
    return np.concatenate([lo, hi], axis=-1), swap


def unorder_grad(d, swap):
    dlo, dhi = d[..., :2], d[..., 2:]
    first = np.where(swap, dhi, dlo)
    second = np.where(swap, dlo, dhi)
    return np.concatenate([first, second], axis=-1)


def corner_box(corners):
    """Head corners -> (cxcywh box for the loss, swap mask)."""
    xyxy, swap = order_corners(corners)
    return xyxy_to_cxcywh(xyxy), swap


def corner_loss(corners, gt, weights: LossWeights):
    """Per-sample box loss of raw head corners and its per-sample gradient.

    GIoU is taken on the corner-sorted box so it stays defined when the head
    emits swapped corners. L1 compares the raw corners, which penalises the
    swap; otherwise a head could converge to inverted corners that inference
    would treat as degenerate. For correctly ordered corners this equals the
    plain weighted GIoU + L1 composite.
    """
    box, swap = corner_box(corners)
    lg, gg = giou_loss(box, gt, return_grad=True)
    ll, gl = l1_box_loss(xyxy_to_cxcywh(corners), gt, return_grad=True)
    per = weights.giou * np.asarray(lg) + weights.l1 * np.asarray(ll)
    d = unorder_grad(cxcywh_grad_to_xyxy(weights.giou * gg), swap) + cxcywh_grad_to_xyxy(weights.l1 * gl)
    return per, d


def box_loss(corners, gt, weights: LossWeights):
    """Batch-mean stage-1/3 loss and its gradient w.r.t. the raw corners."""
    per, d = corner_loss(corners, gt, weights)
    n = len(np.atleast_1d(per))
    return float(np.mean(per)), d / n


def stage2_loss(cv, ct, gt, kl, weights: LossWeights):
    """Batch-mean min-of-modalities loss; gradients w.r.t. both corner sets."""
    lv, dv = corner_loss(cv, gt, weights)
    lt, dt = corner_loss(ct, gt, weights)
    per, pick_v = min_modality_loss(lv, lt, kl, weights)
    n = len(per)
    dcv = np.where(pick_v[:, None], dv, 0.0) / n
    dct = np.where(pick_v[:, None], 0.0, dt) / n
    return float(np.mean(per)), dcv, dct, pick_v


def freeze_plan(model: MACFTModel, stage, cfg: StageConfig, modality=None):
    """Make exactly the stage's groups trainable; return them as optimizer groups."""
    model.set_trainable(False)
    mcfg = model.cfg
    if stage == 1:
        branch, head = getattr(model, modality), getattr(model, f"head_{modality}")
    elif stage == 2:
        branch, head = model.shared, model.head_shared
    else:
        model.fusion.set_trainable(True)
        model.head.set_trainable(True)
        return [(model.fusion.parameters() + model.head.parameters(), cfg.lr_rest)]
    set_trainable(branch, mcfg.freeze, cfg.train_embeddings)
    head.set_trainable(True)
    return [(branch.parameters(), cfg.lr_backbone), (head.parameters(), cfg.lr_rest)]


def _check_prereqs(model, stage):
    done = model.stages_done
    if stage == 2 and 1 not in done:
        raise PrerequisiteError("stage 2 needs the stage-1 checkpoint (specific branches)")
    if stage == 3:
        needed = {1, 2} if model.uses_shared else {1}
        if not needed <= done:
            raise PrerequisiteError(f"stage 3 needs stage(s) {sorted(needed - done)} first")
    if stage == 2 and not model.uses_shared:
        raise PrerequisiteError(f"variant {model.variant} has no shared branch to train")
    if stage == 3 and not model.uses_fusion:
        raise PrerequisiteError(f"variant {model.variant} has no fusion network")


def _step_stage1(model, modality, batch, w):
    key = "rgb" if modality == "rgb" else "tir"
    corners, cache = model.forward_branch(modality, batch[f"z_{key}"], batch[f"x_{key}"])
    loss, dc = box_loss(corners, batch["gt"], w)
    model.backward_branch(modality, dc, cache)
    return loss, {"box": loss}


def _step_stage2(model, batch, w):
    shared, head = model.shared, model.head_shared
    g_v, c_v = shared.forward(batch["z_rgb"], batch["x_rgb"])
    g_t, c_t = shared.forward(batch["z_tir"], batch["x_tir"])
    nz = g_v.n_template
    cv, chv = head.forward(g_v.tokens[:, nz:])
    ct, cht = head.forward(g_t.tokens[:, nz:])
    kl, d_gv, d_gt = kl_divergence_loss(g_v.tokens, g_t.tokens, return_grad=True)
    loss, dcv, dct, pick_v = stage2_loss(cv, ct, batch["gt"], kl, w)
    dsv = _pad_template_rows(head.backward(dcv, chv), nz)
    dst = _pad_template_rows(head.backward(dct, cht), nz)
    shared.backward(dsv + w.kl * d_gv, c_v)
    shared.backward(dst + w.kl * d_gt, c_t)
    return loss, {"box": loss - w.kl * kl, "kl": kl, "rgb_picked": float(np.mean(pick_v))}


def _step_stage3(model, batch, w):
    corners, cache = model.forward_fused(batch["z_rgb"], batch["x_rgb"], batch["z_tir"], batch["x_tir"])
    loss, dc = box_loss(corners, batch["gt"], w)
    model.backward_fused(dc, cache)
    return loss, {"box": loss}


def train_stage(model: MACFTModel, cfg: StageConfig, source, rng, trace=None):
    """Run one training stage in place and return its loss trace rows.

    ``source`` provides ``batch(rng, size)``. ``rng`` is either an integer
    seed, giving every phase its own stream (so a branch trains identically
    whichever variant it belongs to), or a Generator used for all phases.
    Each trace row is ``{stage, phase, step, loss, box, kl}``.
    """
    _check_prereqs(model, cfg.stage)
    weights = LossWeights(cfg.giou_weight, cfg.l1_weight, cfg.kl_weight)
    trace = [] if trace is None else trace
    if cfg.stage == 1:
        phases = model.modalities()
    elif cfg.stage == 2:
        phases = ["shared"]
    else:
        phases = ["fusion"]
    steps_per_epoch = max(1, cfg.samples_per_epoch // cfg.batch_size)
    for phase in phases:
        groups = freeze_plan(model, cfg.stage, cfg, phase if cfg.stage == 1 else None)
        opt = AdamW(groups, weight_decay=cfg.weight_decay)
        prng = rng if isinstance(rng, np.random.Generator) else phase_rng(rng, cfg.stage, phase)
        step = 0
        for epoch in range(cfg.epochs):
            for _ in range(steps_per_epoch):
                batch = source.batch(prng, cfg.batch_size)
                opt.zero_grad()
                if cfg.stage == 1:
                    loss, parts = _step_stage1(model, phase, batch, weights)
                elif cfg.stage == 2:
                    loss, parts = _step_stage2(model, batch, weights)
                else:
                    loss, parts = _step_stage3(model, batch, weights)
                check_finite(loss, f"stage {cfg.stage} loss")
                opt.step()
                trace.append({"stage": cfg.stage, "phase": phase, "step": step, "loss": loss,
                              "box": parts.get("box", loss), "kl": parts.get("kl", 0.0)})
                step += 1
            recent = [r["loss"] for r in trace[-steps_per_epoch:]]
            log.info("stage %d %s epoch %d/%d loss %.4f", cfg.stage, phase, epoch + 1,
                     cfg.epochs, float(np.mean(recent)))
    model.set_trainable(False)
    model.stages_done.add(cfg.stage)
    return trace


def write_trace(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "phase", "step", "loss", "box", "kl"])
        for r in trace:
            w.writerow([r["stage"], r["phase"], r["step"], repr(r["loss"]), repr(r["box"]), repr(r["kl"])])
