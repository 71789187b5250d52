"""Command-line entry point: ``macft <subcommand> [options]``.

Every subcommand reads the flat run configuration (``--config`` plus
``--set key=value`` overrides) and copies the effective configuration into
its output directory.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import VARIANTS, RunConfig
from .engine.checkpoint import load_checkpoint, save_checkpoint
from .metrics import summary, write_report
from .model import build_variant

log = logging.getLogger("macft")


class UsageError(Exception):
    pass


def _load_config(args):
    if args.config:
        return RunConfig.load(args.config, args.set)
    return RunConfig.loads("", args.set)


def _run_dir(args, run: RunConfig):
    if getattr(args, "run_dir", None):
        out = Path(args.run_dir)
    else:
        out = Path("run") / time.strftime("%Y%m%d-%H%M%S")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(run.dumps())
    return out


def _training_sequences(args, run):
    from .data.sequences import load_dataset
    from .pipeline.experiment import synth_from_config
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return synth_from_config(run, "train")


def _model_from_checkpoint(path, run: RunConfig, variant=None):
    state = load_checkpoint(path)
    cfg = run.model_config()
    return build_variant(variant or cfg.variant, cfg, params=state,
                         stage_heads=any(k.startswith("head_") for k in state))


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args, run):
    from .data.sequences import write_dataset
    from .pipeline.experiment import synth_from_config
    if args.seed is not None:
        run.set("seed", args.seed)
    if args.corrupt:
        run.set("synth.corrupt", args.corrupt)
    seqs = synth_from_config(run, args.split)
    out = Path(args.out)
    write_dataset(seqs, out)
    (out / "config.txt").write_text(run.dumps())
    print(f"wrote {len(seqs)} sequences to {out}")


def cmd_train(args, run):
    from .pipeline.experiment import init_rng
    from .pipeline.sampling import SampleSource
    from .pipeline.training import train_stage, write_trace
    out = _run_dir(args, run)
    cfg = run.model_config()
    model = build_variant(cfg.variant, cfg, init_rng(run["seed"]))
    if args.ckpt:
        model.load_state_dict(load_checkpoint(args.ckpt))
    source = SampleSource(_training_sequences(args, run), cfg, run.sample_config())
    stages = model.required_stages() if args.stage == "all" else [int(args.stage)]
    trace = []
    for stage in stages:
        if args.stage == "all" and stage in model.stages_done:
            continue
        train_stage(model, run.stage_config(stage), source, run["seed"], trace)
        save_checkpoint(out / f"stage{stage}.ckpt", model.state_dict())
        print(f"stage {stage} done: {out / f'stage{stage}.ckpt'}")
    write_trace(trace, out / "losses.csv")
    print(f"run directory: {out}")


def _write_results(path, boxes):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "x", "y", "w", "h"])
        for i, b in enumerate(boxes):
            w.writerow([i] + [repr(float(v)) for v in b])


def read_results(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"frame", "x", "y", "w", "h"} <= set(rows[0]):
        raise ValueError(f"{path}: expected a CSV with columns frame,x,y,w,h")
    rows.sort(key=lambda r: int(r["frame"]))
    return np.array([[float(r[k]) for k in ("x", "y", "w", "h")] for r in rows])


def cmd_track(args, run):
    from .data.sequences import load_sequence
    from .pipeline.tracking import track_sequence
    ckpt = Path(args.ckpt)
    if not args.config and (ckpt.parent / "config.txt").exists():
        run = RunConfig.load(ckpt.parent / "config.txt", args.set)
    model = _model_from_checkpoint(ckpt, run, args.variant)
    seq = load_sequence(args.seq)
    boxes = track_sequence(model, seq, run.sample_config())
    out = Path(args.out or f"{seq.name}_results.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_results(out, boxes)
    m = summary(boxes, seq.gt)
    print(f"{seq.name}: {len(boxes)} frames, PR@20={m['pr20']:.4f} SR={m['sr_auc']:.4f} -> {out}")
    if args.attn_dir:
        _export_attention(model, seq, run, args)


def _export_attention(model, seq, run, args):
    from .backbone import export_attention
    from .pipeline.sampling import crop_and_resize, crop_around, template_crops
    scfg = run.sample_config()
    z_v, z_t, _ = template_crops(seq.rgb[0], seq.tir[0], seq.gt[0], model.cfg, scfg)
    t = min(args.attn_frame, len(seq) - 1)
    crop = crop_around(seq.gt[t], scfg.search_factor, model.cfg.search_size)
    x_v, x_t = crop_and_resize(seq.rgb[t], crop)[0], crop_and_resize(seq.tir[t], crop)[0]
    out = Path(args.attn_dir)
    for name, branch in model.branches().items():
        inputs = [(z_v, x_v)] if name == "rgb" else [(z_t, x_t)] if name == "tir" else \
            [(z_v, x_v), (z_t, x_t)]
        for tag, (z, x) in zip(("rgb", "tir") if name == "shared" else (name,), inputs):
            feats, _ = branch.forward(z[None], x[None], record_attention=True)
            sub = out / (name if name != "shared" else f"shared_{tag}")
            export_attention(feats, args.attn_layer, args.attn_head, sub)
    if model.uses_fusion and model.fusion.late_kind == "mam":
        _, cache = model.forward_fused(z_v[None], x_v[None], z_t[None], x_t[None])
        model.fusion.export_attention(cache[2], len(model.fusion.blocks) - 1, args.attn_head, out / "fusion")
    print(f"attention maps written to {out}")


def cmd_eval(args, run):
    from .data.sequences import load_dataset, load_sequence
    seq_path, res_path = Path(args.seq), Path(args.results)
    if (seq_path / "gt.txt").exists():
        seqs = [load_sequence(seq_path)]
        files = {seqs[0].name: res_path}
    else:
        seqs = load_dataset(seq_path)
        if not res_path.is_dir():
            raise UsageError("--seq is a dataset directory, so --results must be a directory of <name>.csv")
        files = {s.name: res_path / f"{s.name}.csv" for s in seqs}
    results = {}
    for s in seqs:
        if not files[s.name].exists():
            raise FileNotFoundError(f"no results for sequence {s.name}: {files[s.name]}")
        preds = read_results(files[s.name])
        if len(preds) != len(s):
            raise ValueError(f"{s.name}: {len(preds)} result rows for {len(s)} frames")
        results[s.name] = (preds, s.gt, s.tags)
    out = Path(args.out) if args.out else _run_dir(args, run) / "report"
    m = write_report(results, out)
    print(f"PR@20={m['pr20']:.4f} SR(AUC)={m['sr_auc']:.4f} SR@0.5={m['sr50']:.4f} -> {out}")


def cmd_ablate(args, run):
    from .pipeline.experiment import ablate, synth_from_config, write_rows
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s) {bad}; choose from {', '.join(VARIANTS)}")
    out = _run_dir(args, run)
    train = _training_sequences(args, run)
    tests = {c: synth_from_config(run, "test", corrupt=c) for c in args.test_sets.split(",")}
    rows = ablate(variants, run, train, tests)
    write_rows(rows, out / "ablation.csv", ["variant", "test_set", "mean_iou", "pr20", "sr_auc", "sr50", "frames"])
    for r in rows:
        print(f"{r['variant']:<11} {r['test_set']:<6} IoU={r['mean_iou']:.4f} PR@20={r['pr20']:.4f} "
              f"SR={r['sr_auc']:.4f}")
    print(f"-> {out / 'ablation.csv'}")


def parse_k(spec):
    """``"1..8"`` or ``"1,2,6"`` -> list of depths."""
    try:
        if ".." in spec:
            lo, hi = spec.split("..")
            ks = list(range(int(lo), int(hi) + 1))
        else:
            ks = [int(k) for k in spec.split(",")]
    except ValueError:
        raise UsageError(f"--k expects 'a..b' or a comma list, got {spec!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError(f"--k needs depths >= 1, got {spec!r}")
    return ks


def cmd_sweep_mam(args, run):
    from .pipeline.experiment import sweep_mam, synth_from_config, write_rows
    ks = parse_k(args.k)
    out = _run_dir(args, run)
    rows = sweep_mam(ks, run, _training_sequences(args, run), synth_from_config(run, "test"))
    write_rows(rows, out / "sweep_mam.csv", ["k", "pr20", "sr_auc", "sr50", "mean_iou", "frames"])
    for r in rows:
        print(f"K={r['k']}: PR@20={r['pr20']:.4f} SR={r['sr_auc']:.4f}")
    print(f"-> {out / 'sweep_mam.csv'}")


def cmd_gradcheck(args, run):
    from .verify import run_suite
    results = run_suite(seeds=tuple(range(args.seeds)), log=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    if failed:
        raise RuntimeError(f"{len(failed)} gradient check(s) failed")


# -- parser --------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (key=value lines)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="macft", description="RGB-T tracker training and evaluation")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--split", choices=("train", "test"), default="train")
    s.add_argument("--corrupt", choices=("none", "mixed", "rgb50", "tir50"))
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="run training stages")
    s.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")
    s.add_argument("--data", help="dataset directory (default: synthesize from config)")
    s.add_argument("--ckpt", help="checkpoint holding the prerequisite stages")
    s.add_argument("--run-dir", help="output directory (default run/<timestamp>)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("track", parents=[common], help="track one sequence")
    s.add_argument("--seq", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--out", help="results CSV (frame,x,y,w,h)")
    s.add_argument("--attn-dir", help="also export attention maps here")
    s.add_argument("--attn-layer", type=int, default=0)
    s.add_argument("--attn-head", type=int, default=0)
    s.add_argument("--attn-frame", type=int, default=1)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", parents=[common], help="score results against ground truth")
    s.add_argument("--results", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--out", help="report directory")
    s.add_argument("--run-dir")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="compare variants with one recipe")
    s.add_argument("--variants", default=",".join(VARIANTS))
    s.add_argument("--test-sets", default="none,rgb50,tir50",
                   help="comma list of synthetic corruption modes to test on")
    s.add_argument("--data")
    s.add_argument("--run-dir")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", parents=[common], help="central-difference verification suite")
    s.add_argument("--seeds", type=int, default=5)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep-mam", parents=[common], help="metrics versus MAM depth K")
    s.add_argument("--k", default="1..8")
    s.add_argument("--data")
    s.add_argument("--run-dir")
    s.set_defaults(func=cmd_sweep_mam)
    return p


def _thread_limit():
    raw = os.environ.get("MACFT_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MACFT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"MACFT_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        threads = _thread_limit()
        run = _load_config(args)
    except (UsageError, ValueError, KeyError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"macft: error: {exc}", file=sys.stderr)
        return 2
    try:
        if threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                args.func(args, run)
        else:
            args.func(args, run)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"macft: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report, nonzero exit
        print(f"macft: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
