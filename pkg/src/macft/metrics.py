"""Precision / success evaluation (CLE and IoU based)."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

PR_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
SR_THRESHOLDS = np.linspace(0.0, 1.0, 21)


def _boxes(a):
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != 4:
        raise ValueError(f"boxes must have 4 coordinates, got shape {a.shape}")
    return a


def cle(pred, gt):
    """Euclidean distance between box centres (``x, y, w, h`` boxes)."""
    p, g = _boxes(pred), _boxes(gt)
    d = (p[..., :2] + p[..., 2:] / 2) - (g[..., :2] + g[..., 2:] / 2)
    out = np.sqrt((d * d).sum(axis=-1))
    return float(out) if out.ndim == 0 else out


def iou(a, b):
    a, b = _boxes(a), _boxes(b)
    # extents from corner differences throughout, so identical boxes give exactly 1
    a1, a2 = a[..., :2], a[..., :2] + a[..., 2:]
    b1, b2 = b[..., :2], b[..., :2] + b[..., 2:]
    ext_i = np.maximum(np.minimum(a2, b2) - np.maximum(a1, b1), 0)
    inter = ext_i[..., 0] * ext_i[..., 1]
    ext_a, ext_b = a2 - a1, b2 - b1
    union = ext_a[..., 0] * ext_a[..., 1] + ext_b[..., 0] * ext_b[..., 1] - inter
    out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def _check_lengths(preds, gts):
    p, g = _boxes(preds).reshape(-1, 4), _boxes(gts).reshape(-1, 4)
    if len(p) != len(g):
        raise ValueError(f"{len(p)} predictions for {len(g)} ground-truth boxes")
    return p, g


def precision_curve(preds, gts, thresholds=PR_THRESHOLDS):
    """Fraction of frames with CLE <= t for each t; returns (curve, PR@20)."""
    p, g = _check_lengths(preds, gts)
    errors = cle(p, g)
    curve = (errors[None, :] <= np.asarray(thresholds, dtype=np.float64)[:, None]).mean(axis=1)
    return curve, float((errors <= 20.0).mean())


def success_values(overlaps, thresholds=SR_THRESHOLDS):
    """Success fraction per threshold from raw IoU values.

    A frame succeeds at ``t`` when IoU > t; at the closing threshold t = 1 a
    perfect overlap (IoU == 1) counts as success.
    """
    o = np.asarray(overlaps, dtype=np.float64)
    t = np.asarray(thresholds, dtype=np.float64)[:, None]
    hit = (o[None, :] > t) | ((t >= 1.0) & (o[None, :] >= 1.0))
    return hit.mean(axis=1)


def success_curve(preds, gts, thresholds=SR_THRESHOLDS):
    """Returns (curve, SR as trapezoid AUC, SR@0.5)."""
    p, g = _check_lengths(preds, gts)
    o = iou(p, g)
    curve = success_values(o, thresholds)
    t = np.asarray(thresholds, dtype=np.float64)
    auc = float(np.trapezoid(curve, t) / (t[-1] - t[0]))
    return curve, auc, float(success_values(o, [0.5])[0])


def summary(preds, gts):
    _, pr20 = precision_curve(preds, gts)
    _, auc, sr50 = success_curve(preds, gts)
    p, g = _check_lengths(preds, gts)
    return {"pr20": pr20, "sr_auc": auc, "sr50": sr50, "mean_iou": float(np.mean(iou(p, g))),
            "frames": len(p)}


def attribute_report(results, path=None):
    """Per-attribute PR/SR table.

    ``results`` maps sequence name -> (preds, gts, tags). Frames of every
    sequence carrying a tag are pooled for that tag; all frames go to ``ALL``.
    Rows are sorted by tag with ``ALL`` last. Optionally written as CSV.
    """
    pooled = {}
    for name in sorted(results):
        preds, gts, tags = results[name]
        p, g = _check_lengths(preds, gts)
        for tag in set(tags) | {"ALL"}:
            pooled.setdefault(tag, []).append((p, g))
    rows = []
    for tag in sorted(t for t in pooled if t != "ALL") + ["ALL"]:
        p = np.concatenate([x for x, _ in pooled[tag]])
        g = np.concatenate([y for _, y in pooled[tag]])
        rows.append({"attribute": tag, **summary(p, g)})
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["attribute", "frames", "pr20", "sr_auc", "sr50", "mean_iou"])
            w.writeheader()
            for r in rows:
                w.writerow({k: r[k] for k in w.fieldnames})
    return rows


def _svg_plot(xs, ys, xlabel, ylabel, title):
    w, h, m = 420, 320, 50
    x0, x1 = float(xs[0]), float(xs[-1])
    sx = lambda x: m + (x - x0) / (x1 - x0) * (w - 2 * m)
    sy = lambda y: h - m - y * (h - 2 * m)
    pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
    ticks = "".join(
        f'<text x="{m - 8}" y="{sy(v) + 4:.1f}" font-size="10" text-anchor="end">{v:.1f}</text>'
        for v in (0.0, 0.5, 1.0))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">\n'
        f'<rect width="{w}" height="{h}" fill="white"/>\n'
        f'<line x1="{m}" y1="{h - m}" x2="{w - m}" y2="{h - m}" stroke="black"/>\n'
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h - m}" stroke="black"/>\n'
        f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{pts}"/>\n'
        f'<text x="{w / 2}" y="{h - 12}" font-size="12" text-anchor="middle">{xlabel}</text>\n'
        f'<text x="14" y="{h / 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {h / 2})">{ylabel}</text>\n'
        f'<text x="{w / 2}" y="20" font-size="13" text-anchor="middle">{title}</text>\n'
        f'<text x="{m}" y="{h - m + 14}" font-size="10" text-anchor="middle">{x0:g}</text>\n'
        f'<text x="{w - m}" y="{h - m + 14}" font-size="10" text-anchor="middle">{x1:g}</text>\n'
        f"{ticks}\n</svg>\n")


def write_report(results, out_dir):
    """Write pr/sr curves (CSV + SVG) and the attribute table for ``results``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(results)
    p = np.concatenate([_boxes(results[n][0]).reshape(-1, 4) for n in names])
    g = np.concatenate([_boxes(results[n][1]).reshape(-1, 4) for n in names])
    pr, pr20 = precision_curve(p, g)
    sr, auc, sr50 = success_curve(p, g)
    with open(out / "pr_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision"])
        w.writerows([[f"{t:g}", f"{v:.10g}"] for t, v in zip(PR_THRESHOLDS, pr)])
    with open(out / "sr_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "success"])
        w.writerows([[f"{t:.2f}", f"{v:.10g}"] for t, v in zip(SR_THRESHOLDS, sr)])
    (out / "pr_curve.svg").write_text(_svg_plot(PR_THRESHOLDS, pr, "location error threshold (px)",
                                                "precision", f"Precision plot (PR@20={pr20:.3f})"))
    (out / "sr_curve.svg").write_text(_svg_plot(SR_THRESHOLDS, sr, "overlap threshold",
                                                "success rate", f"Success plot (AUC={auc:.3f})"))
    attribute_report(results, out / "attributes.csv")
    return {"pr20": pr20, "sr_auc": auc, "sr50": sr50}
