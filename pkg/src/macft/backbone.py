"""One-stream mixed-attention transformer branch.

Template and search tokens are concatenated (template first) and run through
pre-norm encoder layers whose attention spans the joint sequence, so the
template->template, template->search, search->template and search->search
blocks all come out of a single softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine.nn import FeedForward, LayerNorm, Module, MultiHeadAttention
from .patch_embed import PatchEmbed, TokenSequence

BLOCK_NAMES = ("zz", "zx", "xz", "xx")


@dataclass
class BranchFeatures:
    """Joint ``(B, N_z+N_x, D)`` features with the partition they came from."""

    tokens: np.ndarray
    n_template: int
    n_search: int
    attention: list = field(default_factory=list, repr=False)
    search_only: bool = False

    def __post_init__(self):
        expect = self.n_search if self.search_only else self.n_template + self.n_search
        if self.tokens.shape[-2] != expect:
            raise ValueError(f"feature rows {self.tokens.shape[-2]} != expected {expect}")


def mixed_attention(tokens, attn: MultiHeadAttention, partition):
    """Multi-head attention over the concatenated template+search sequence.

    ``partition`` is ``(N_z, N_x)``; it is required so the block structure can
    be addressed later. Returns ``(out, cache)``.
    """
    if partition is None:
        raise ValueError("mixed_attention needs the (N_z, N_x) partition")
    nz, nx = partition
    if tokens.shape[-2] != nz + nx:
        raise ValueError(f"{tokens.shape[-2]} tokens but partition {nz}+{nx}")
    return attn.forward(tokens)


def attention_blocks(probs, n_template):
    """Split a ``(N, N)`` attention matrix into its (zz, zx, xz, xx) blocks."""
    nz = n_template
    return {
        "zz": probs[:nz, :nz],
        "zx": probs[:nz, nz:],
        "xz": probs[nz:, :nz],
        "xx": probs[nz:, nz:],
    }


class EncoderLayer(Module):
    """r* = r + MA(LN(r));  r' = r* + FFN(LN(r*))."""

    def __init__(self, dim, heads, mlp_ratio, rng):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, dim * mlp_ratio, rng)

    def forward(self, r, partition):
        h, c1 = self.ln1.forward(r)
        a, ca = mixed_attention(h, self.attn, partition)
        r_star = r + a
        h2, c2 = self.ln2.forward(r_star)
        f, cf = self.ffn.forward(h2)
        return r_star + f, (c1, ca, c2, cf)

    def backward(self, dout, cache):
        c1, ca, c2, cf = cache
        dr_star = dout + self.ln2.backward(self.ffn.backward(dout, cf), c2)
        return dr_star + self.ln1.backward(self.attn.backward(dr_star, ca), c1)


class Backbone(Module):
    """Patch embedding, ``depth`` encoder layers and a final LayerNorm."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.embed = PatchEmbed(cfg, rng)
        self.layers = [EncoderLayer(cfg.dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)

    def forward_tokens(self, seq: TokenSequence, record_attention=False):
        r = seq.tokens
        if r.shape[-1] != self.cfg.dim:
            raise ValueError(f"token dim {r.shape[-1]} != model dim {self.cfg.dim}")
        caches = []
        attention = []
        for layer in self.layers:
            r, c = layer.forward(r, seq.partition)
            caches.append(c)
            if record_attention:
                attention.append(MultiHeadAttention.probs(c[1]))
        out, cn = self.norm.forward(r)
        feats = BranchFeatures(out, seq.n_template, seq.n_search, attention)
        return feats, (caches, cn)

    def forward(self, z_img, x_img, record_attention=False):
        """Run the branch on template and search images (``(B, H, W, C)``)."""
        z_img = np.asarray(z_img, dtype=np.float64)
        x_img = np.asarray(x_img, dtype=np.float64)
        if z_img.ndim == 3:
            z_img, x_img = z_img[None], x_img[None]
        seq, ce = self.embed.forward(z_img, x_img)
        feats, (caches, cn) = self.forward_tokens(seq, record_attention)
        return feats, (ce, caches, cn)

    def backward(self, dfeat, cache):
        """Accumulate parameter gradients; images receive no gradient."""
        ce, caches, cn = cache
        # nothing below the lowest trainable piece needs a gradient
        embed_trainable = self.embed.any_trainable()
        lowest = next((i for i, l in enumerate(self.layers) if l.any_trainable()), None)
        if lowest is None and not embed_trainable and not self.norm.any_trainable():
            return
        stop = 0 if embed_trainable else (lowest if lowest is not None else len(self.layers))
        d = self.norm.backward(dfeat, cn)
        for i in range(len(self.layers) - 1, stop - 1, -1):
            d = self.layers[i].backward(d, caches[i])
        if embed_trainable:
            self.embed.backward(d, ce)


def set_trainable(backbone: Backbone, freeze_count, train_embeddings=False):
    """Freeze layers ``0..freeze_count-1``; train the rest and the final norm.

    Returns the per-layer trainability mask.
    """
    depth = len(backbone.layers)
    if not 0 <= freeze_count <= depth:
        raise ValueError(f"freeze count {freeze_count} outside [0, {depth}]")
    mask = [i >= freeze_count for i in range(depth)]
    for layer, flag in zip(backbone.layers, mask):
        layer.set_trainable(flag)
    backbone.norm.set_trainable(True)
    backbone.embed.set_trainable(train_embeddings)
    return mask


def export_attention(features: BranchFeatures, layer, head, out_dir, sample=0,
                     names=BLOCK_NAMES, n_first=None):
    """Write the four attention blocks of one layer/head as CSV and 8-bit PGM.

    Files are ``L{layer}_H{head}_{block}.csv|.pgm`` in ``out_dir``. Returns the
    blocks as a dict.
    """
    if not features.attention:
        raise RuntimeError("attention was not recorded; run forward with record_attention=True")
    probs = features.attention[layer][sample, head]
    n_first = features.n_template if n_first is None else n_first
    blocks = dict(zip(names, attention_blocks(probs, n_first).values()))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, block in blocks.items():
        stem = out_dir / f"L{layer}_H{head}_{name}"
        np.savetxt(stem.with_suffix(".csv"), block, delimiter=",", fmt="%.10g")
        write_pgm(stem.with_suffix(".pgm"), block)
    return blocks


def write_pgm(path, arr):
    """Binary 8-bit PGM heatmap, min-max scaled."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())
