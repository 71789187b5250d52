"""Acceptance suite. Each test checks one criterion at its stated tolerance and
records a single PASS/FAIL line, repeated in the pytest terminal summary."""

import hashlib
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from macft.backbone import Backbone, mixed_attention, set_trainable
from macft.boxes import xywh_to_cxcywh
from macft.cli import main, read_results
from macft.config import RunConfig, paper_scale_config
from macft.corner_head import CornerHead
from macft.engine.nn import MultiHeadAttention
from macft.fusion import MAM, FusionConfig, FusionNetwork
from macft.metrics import cle, iou, precision_curve, success_curve, PR_THRESHOLDS, SR_THRESHOLDS
from macft.model import build_variant
from macft.objectives import LossWeights, composite_loss_stage2, giou_loss
from macft.pipeline import SampleSource, train_stage
from macft.pipeline.experiment import StageCache, evaluate, init_rng, mean_iou, synth_from_config
from macft.shared_branch import kl_divergence_loss
from macft.verify import run_suite

from oracles import attention_heads, block_attention, layer_norm_rows

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


# -- 1 ---------------------------------------------------------------------------

def test_gradient_suite(record_criterion):
    t0 = time.perf_counter()
    results = run_suite(seeds=(0, 1, 2, 3, 4), h=1e-5, tol=1e-4)
    seconds = time.perf_counter() - t0
    failed = [f"{r.name}/{r.seed}" for r in results if not r.passed]
    worst = max(r.report.max_rel_error for r in results)
    ok = not failed and seconds < 120
    record_criterion(1, ok, f"{len(results) - len(failed)}/{len(results)} checks passed, "
                            f"max rel err {worst:.2e} (tol 1e-4), {seconds:.0f} s (budget 120 s)"
                            + (f", failed: {failed[:5]}" if failed else ""))
    assert ok


# -- 2 ---------------------------------------------------------------------------

def _mam_oracle_error(rng):
    blk = MAM(8, 2, 2, rng)
    for p in blk.parameters():
        p.data[:] = rng.normal(0, 0.4, size=p.shape)
    n = int(rng.integers(1, 6))
    s_a, s_b = rng.normal(size=(1, n, 8)), rng.normal(size=(1, n, 8))
    (oa, ob), _ = blk.mixed(s_a, s_b)
    joint = layer_norm_rows(np.concatenate([s_a[0], s_b[0]]), blk.ln.gamma.data, blk.ln.beta.data, 1e-6)
    a = blk.attn
    ref, _ = attention_heads(joint, joint, a.qkv.weight.data, a.qkv.bias.data, a.proj.weight.data,
                             a.proj.bias.data, 2)
    return max(np.abs(oa[0] - ref[:n]).max(), np.abs(ob[0] - ref[n:]).max())


def _mixed_attention_error(rng):
    attn = MultiHeadAttention(8, 2, rng)
    for p in attn.parameters():
        p.data[:] = rng.normal(0, 0.5, size=p.shape)
    nz, nx = int(rng.integers(1, 5)), int(rng.integers(1, 9))
    z, x = rng.normal(size=(nz, 8)), rng.normal(size=(nx, 8))
    out, _ = mixed_attention(np.concatenate([z, x])[None], attn, (nz, nx))
    oz, ox = block_attention([z, x], [z, x], attn.qkv.weight.data, attn.qkv.bias.data,
                             attn.proj.weight.data, attn.proj.bias.data, 2)
    return max(np.abs(out[0, :nz] - oz).max(), np.abs(out[0, nz:] - ox).max())


def test_equation_oracles(record_criterion):
    rng = np.random.default_rng(2024)
    mam_err = max(_mam_oracle_error(rng) for _ in range(100))
    ma_err = max(_mixed_attention_error(rng) for _ in range(100))

    kl = kl_divergence_loss(np.log([[0.5, 0.5]]), np.log([[0.25, 0.75]]))
    g_v, g_t = rng.normal(0, 3, (10_000, 8)), rng.normal(0, 3, (10_000, 8))
    kl_min = min(kl_divergence_loss(g_v[i:i + 1], g_t[i:i + 1]) for i in range(10_000))

    c = lambda b: xywh_to_cxcywh(np.array(b, dtype=np.float64))
    g1 = giou_loss(c([0, 0, 2, 2]), c([1, 1, 2, 2]))
    g2 = giou_loss(c([0, 0, 1, 1]), c([9, 9, 1, 1]))

    w = LossWeights(giou=0, l1=4, kl=800)
    gt = np.array([0.5, 0.5, 0.2, 0.2])
    b_v, b_t = gt + [0.3, 0, 0, 0], gt + [0.5, 0, 0, 0]
    pick = composite_loss_stage2(b_v, gt, b_t, gt, 0.0, w)
    extra = composite_loss_stage2(b_v, gt, b_t, gt, 1e-4, w) - pick
    tie = composite_loss_stage2(b_v, gt, b_v, gt, 0.0, LossWeights(), return_grad=True)[3]

    checks = {
        "MAM==joint attention": mam_err <= 1e-10,
        "mixed==blocks": ma_err <= 1e-10,
        "KL fixture": abs(kl - 0.14384) <= 1e-5,
        "KL>=0": kl_min >= 0,
        "GIoU 1.0794": abs(g1 - 1.0794) <= 1e-4,
        "GIoU 1.98": abs(g2 - 1.98) <= 1e-4,
        "min 0.3": abs(pick - 0.3) <= 1e-12,
        "KL*800 adds 0.08": abs(extra - 0.08) <= 1e-12,
        "tie->RGB": bool(tie),
    }
    ok = all(checks.values())
    record_criterion(2, ok, f"MAM err {mam_err:.1e}, mixed err {ma_err:.1e}, KL {kl:.6f}, "
                            f"min KL over 1e4 pairs {kl_min:.2e}, GIoU {g1:.6f}/{g2:.6f}, "
                            f"failed: {[k for k, v in checks.items() if not v]}")
    assert ok


# -- 3 ---------------------------------------------------------------------------

def _paper_scale_forward(seed=0):
    """Randomly initialised full-scale forward, one backbone in memory at a time."""
    cfg = paper_scale_config()
    data = np.random.default_rng(seed)
    z_v, z_t = data.random((2, 1, 112, 112, 3))
    x_v, x_t = data.random((2, 1, 224, 224, 3))
    feats = {}
    for i, (name, pairs) in enumerate((("rgb", [("r_v", z_v, x_v)]), ("tir", [("r_t", z_t, x_t)]),
                                       ("shared", [("g_v", z_v, x_v), ("g_t", z_t, x_t)]))):
        branch = Backbone(cfg, np.random.default_rng([seed, i]))
        for key, z, x in pairs:
            feats[key] = branch.forward(z, x)[0]
        del branch
    fusion = FusionNetwork(FusionConfig(cfg.dim, cfg.mam_depth, cfg.heads, cfg.mlp_ratio),
                           np.random.default_rng([seed, 3]))
    fused, _ = fusion.forward(feats["r_v"], feats["r_t"], feats["g_v"], feats["g_t"])
    del fusion
    head = CornerHead(cfg.dim, np.random.default_rng([seed, 4]))
    (tl, br), _ = head.heatmaps(fused)
    corners, _ = head.forward(fused)
    return feats, fused, tl, br, corners


def test_paper_scale_shapes(record_criterion):
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        feats, fused, tl, br, corners = _paper_scale_forward()
    seconds = time.perf_counter() - t0
    shapes = {
        "joint tokens": feats["r_v"].tokens.shape == (1, 49 + 196, 768),
        "fused": fused.shape == (1, 196, 768),
        "heatmaps": tl.shape == br.shape == (1, 14, 14),
        "box": corners.shape == (1, 4),
        "box in unit square": bool(np.all((corners >= 0) & (corners <= 1))),
    }
    ok = all(shapes.values()) and seconds < 60
    record_criterion(3, ok, f"fused {fused.shape[1:]}, heatmaps {tl.shape[1:]}x2, corners {np.round(corners[0], 3)}, "
                            f"{seconds:.1f} s single-threaded (budget 60 s)")
    assert ok


# -- 4 ---------------------------------------------------------------------------

# horizontal shifts (px) of a 20x20 box, so CLE == shift and IoU == (20-s)/(20+s)
SHIFTS = [0, 2, 4, 6, 8, 10, 15, 22, 30, 40]
HAND_CLE = [0, 2, 4, 6, 8, 10, 15, 22, 30, 40]
HAND_IOU = [1, 18 / 22, 16 / 24, 14 / 26, 12 / 28, 10 / 30, 5 / 35, 0, 0, 0]


def test_metric_oracles(record_criterion):
    gt = np.tile([10.0, 10.0, 20.0, 20.0], (10, 1))
    pred = gt + np.array([[s, 0, 0, 0] for s in SHIFTS], dtype=np.float64)
    pr, pr20 = precision_curve(pred, gt)
    sr, auc, sr50 = success_curve(pred, gt)
    # spreadsheet columns: one count per threshold over the hand tables
    hand_pr = np.array([sum(c <= t for c in HAND_CLE) / 10 for t in PR_THRESHOLDS])
    hand_sr = np.array([sum(o > t or (t >= 1 and o >= 1) for o in HAND_IOU) / 10 for t in SR_THRESHOLDS])
    hand_auc = sum((hand_sr[i] + hand_sr[i + 1]) / 2 * 0.05 for i in range(20))
    checks = {
        "cle": np.array_equal(cle(pred, gt), HAND_CLE),
        "iou": np.allclose(iou(pred, gt), HAND_IOU, rtol=0, atol=1e-15),
        "pr curve": np.array_equal(pr, hand_pr),
        "sr curve": np.array_equal(sr, hand_sr),
        "pr20": abs(pr20 - 0.7) <= 1e-12,
        "sr50": abs(sr50 - 0.4) <= 1e-12,
        "auc": abs(auc - hand_auc) <= 1e-12,
        "monotone": bool(np.all(np.diff(pr) >= 0) and np.all(np.diff(sr) <= 0)),
    }
    ok = all(checks.values())
    record_criterion(4, ok, f"PR@20 {pr20}, SR@0.5 {sr50}, SR(AUC) {auc:.6f}, "
                            f"failed: {[k for k, v in checks.items() if not v]}")
    assert ok


# -- 5 ---------------------------------------------------------------------------

def test_desk_learning(record_criterion):
    run = RunConfig.load(CONFIGS / "acceptance.txt")
    t0 = time.perf_counter()
    train = synth_from_config(run, "train")
    cache = StageCache(run, SampleSource(train, run.model_config(), run.sample_config()))
    full = cache.variant("full")
    train_stage(full, run.stage_config(3), cache.source, run["seed"])
    clean = synth_from_config(run, "test")
    score = mean_iou(evaluate(full, clean, run.sample_config()))
    seconds = time.perf_counter() - t0
    ok = score >= 0.5 and seconds <= 20 * 60
    record_criterion(5, ok, f"full variant mean IoU {score:.3f} on {len(clean)} held-out clean sequences "
                            f"(bar 0.5), {seconds / 60:.1f} min (budget 20 min)")
    assert ok


# -- 6 ---------------------------------------------------------------------------

# (test set, corrupted single-modality variant, clean single-modality variant)
ORDERING_CASES = (("rgb50", "b-rgb", "b-t"), ("tir50", "b-t", "b-rgb"))


def test_fusion_ordering(record_criterion):
    # every variant sees the same training data, in which each sequence has one
    # blanked frame range on a random modality; the property must hold whichever
    # modality is corrupted at test time
    run = RunConfig.load(CONFIGS / "acceptance.txt", ["synth.corrupt=mixed"])
    scfg = run.sample_config()
    cache = StageCache(run, SampleSource(synth_from_config(run, "train"), run.model_config(), scfg))
    tests = {label: synth_from_config(run, "test", corrupt=label) for label, _, _ in ORDERING_CASES}
    scores = {}
    for name in ("full", "dm", "b-rgb", "b-t"):
        model = cache.variant(name)
        if model.uses_fusion:
            train_stage(model, run.stage_config(3), cache.source, run["seed"])
        for label, seqs in tests.items():
            scores[label, name] = mean_iou(evaluate(model, seqs, scfg))
    failed, lines = [], []
    for label, bad, good in ORDERING_CASES:
        s = {v: scores[label, v] for v in ("full", "dm", bad, good)}
        checks = {
            "full>=dm": s["full"] >= s["dm"],
            f"dm>={bad}+0.05": s["dm"] >= s[bad] + 0.05,
            f"full>={good}-0.05": s["full"] >= s[good] - 0.05,
        }
        failed += [f"{label}: {k}" for k, v in checks.items() if not v]
        lines.append(f"{label}: " + ", ".join(f"{k} {v:.3f}" for k, v in s.items()))
    ok = not failed
    record_criterion(6, ok, "; ".join(lines) + f"; failed: {failed}")
    assert ok


# -- 7 ---------------------------------------------------------------------------

def test_determinism(record_criterion, tmp_path):
    desk = ["--config", str(CONFIGS / "desk.txt")]
    assert main(["synth", "--out", str(tmp_path / "test"), "--split", "test"] + desk) == 0
    seq = sorted(p for p in (tmp_path / "test").iterdir() if p.is_dir())[0]
    for run in ("a", "b"):
        assert main(["train", "--run-dir", str(tmp_path / run)] + desk) == 0
        assert main(["track", "--seq", str(seq), "--ckpt", str(tmp_path / run / "stage3.ckpt"),
                     "--out", str(tmp_path / run / "boxes.csv")]) == 0
    same = {}
    for name in ("losses.csv", "stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "boxes.csv"):
        a, b = (tmp_path / "a" / name).read_bytes(), (tmp_path / "b" / name).read_bytes()
        same[name] = a == b
    digest = hashlib.sha256((tmp_path / "a" / "stage3.ckpt").read_bytes()).hexdigest()[:12]
    n_boxes = len(read_results(tmp_path / "a" / "boxes.csv"))
    ok = all(same.values())
    record_criterion(7, ok, f"two desk runs, seed 0: identical {[k for k, v in same.items() if v]}"
                            f", differing {[k for k, v in same.items() if not v]}; stage3 sha256 {digest}, "
                            f"{n_boxes} boxes")
    assert ok


# -- 8 ---------------------------------------------------------------------------

def _digest(model):
    return {n: hashlib.sha256(p.data.tobytes()).digest() for n, p in model.named_parameters()}


def test_freeze_policy(record_criterion):
    run = RunConfig.loads("", ["train.samples_per_epoch=32", "train.stage1.epochs=1", "train.stage2.epochs=1",
                               "train.stage3.epochs=1", "synth.sequences=4"])
    cfg = run.model_config()
    model = build_variant("full", cfg, init_rng(0))
    source = SampleSource(synth_from_config(run, "train"), cfg, run.sample_config())
    trainable = {1: ("rgb.", "head_rgb.", "tir.", "head_tir."), 2: ("shared.", "head_shared."),
                 3: ("fusion.", "head.")}
    frozen_layers = tuple(f".layers.{i}." for i in range(cfg.freeze))
    violations, changed = [], []
    before = _digest(model)
    for stage in (1, 2, 3):
        train_stage(model, run.stage_config(stage), source, run["seed"])
        after = _digest(model)
        changed.append(sum(after[n] != before[n] for n in after))
        for n in after:
            allowed = n.startswith(trainable[stage]) and not any(f in n for f in frozen_layers)
            if not allowed and after[n] != before[n]:
                violations.append(f"stage {stage}: {n}")
        before = after

    big = Backbone(paper_scale_config(), np.random.default_rng(0))
    mask = set_trainable(big, 8)
    n_train = sum(layer.any_trainable() for layer in big.layers)
    del big
    ok = not violations and min(changed) > 0 and n_train == 4 and mask == [False] * 8 + [True] * 4
    record_criterion(8, ok, f"{len(violations)} frozen tensors changed across 3 stages, "
                            f"trainable tensors updated per stage {changed} "
                            f"(first layer of each branch frozen at desk scale); paper scale F=8, L=12 -> "
                            f"{n_train} trainable layers")
    assert ok


# -- 9 ---------------------------------------------------------------------------

def test_mam_depth_sweep(record_criterion, tmp_path):
    small = ["--set", "synth.sequences=8", "--set", "synth.test_sequences=4", "--set", "train.samples_per_epoch=64",
             "--set", "train.stage1.epochs=1", "--set", "train.stage2.epochs=1", "--set", "train.stage3.epochs=1"]
    code = main(["sweep-mam", "--k", "1..8", "--run-dir", str(tmp_path)] + small)
    import csv
    path = tmp_path / "sweep_mam.csv"
    rows = list(csv.DictReader(path.open())) if path.exists() else []
    ks = [int(r["k"]) for r in rows]
    bounded = all(0 <= float(r[m]) <= 1 for r in rows for m in ("pr20", "sr_auc", "sr50", "mean_iou"))
    ok = code == 0 and ks == list(range(1, 9)) and bounded
    record_criterion(9, ok, f"exit {code}, K={ks}, PR@20 by K "
                            f"{[round(float(r['pr20']), 3) for r in rows]}, columns {list(rows[0]) if rows else []}")
    assert ok
