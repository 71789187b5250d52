"""Modality-adaptive fusion: cross-attention (CAM) and mixed-attention (MAM) blocks.

Attention partitions run along the token axis; every Concat that feeds a
dimensionality reduction runs along the channel axis of spatially aligned
search tokens, so the output keeps exactly N_x tokens for the corner head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BranchFeatures, attention_blocks, write_pgm
from .engine.nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention


@dataclass
class FusionConfig:
    channels: int
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError(f"fusion depth must be >= 0, got {self.depth}")
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")


def select_search_part(feats):
    """Drop the template rows of joint features: rows N_z .. N_z+N_x-1."""
    if not isinstance(feats, BranchFeatures) or feats.search_only:
        raise ValueError("select_search_part needs joint features with a template/search partition")
    return feats.tokens[..., feats.n_template:, :]


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"stream shapes differ: {a.shape} vs {b.shape}")


class _StreamFFN(Module):
    """Per-stream pre-norm FFN with residual."""

    def __init__(self, dim, mlp_ratio, rng):
        self.ln = LayerNorm(dim)
        self.ffn = FeedForward(dim, dim * mlp_ratio, rng)

    def forward(self, s):
        h, cl = self.ln.forward(s)
        f, cf = self.ffn.forward(h)
        return s + f, (cl, cf)

    def backward(self, d, cache):
        cl, cf = cache
        return d + self.ln.backward(self.ffn.backward(d, cf), cl)


class CAM(Module):
    """Cross-attention only: queries from one stream, keys/values from the other.

    out_a = s_a + Attn(q=LN(s_a), kv=LN(s_b)), out_b symmetric, then a
    per-stream FFN. Projections are shared between the two directions.
    """

    kind = "cam"

    def __init__(self, dim, heads, mlp_ratio, rng):
        self.ln = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ffn_a = _StreamFFN(dim, mlp_ratio, rng)
        self.ffn_b = _StreamFFN(dim, mlp_ratio, rng)

    def cross(self, s_a, s_b):
        """Attention sublayer only; returns ((att_a, att_b), cache)."""
        _check_pair(s_a, s_b)
        ha, cla = self.ln.forward(s_a)
        hb, clb = self.ln.forward(s_b)
        (qa, ka, va), cpa = self.attn.project(ha)
        (qb, kb, vb), cpb = self.attn.project(hb)
        ctx_a, caa = self.attn.attend(qa, kb, vb)
        ctx_b, cab = self.attn.attend(qb, ka, va)
        oa, cma = self.attn.merge(ctx_a)
        ob, cmb = self.attn.merge(ctx_b)
        return (oa, ob), (cla, clb, cpa, cpb, caa, cab, cma, cmb)

    def cross_backward(self, doa, dob, cache):
        cla, clb, cpa, cpb, caa, cab, cma, cmb = cache
        dqa, dkb, dvb = self.attn.attend_backward(self.attn.merge_backward(doa, cma), caa)
        dqb, dka, dva = self.attn.attend_backward(self.attn.merge_backward(dob, cmb), cab)
        dha = self.attn.project_backward(dqa, dka, dva, cpa)
        dhb = self.attn.project_backward(dqb, dkb, dvb, cpb)
        return self.ln.backward(dha, cla), self.ln.backward(dhb, clb)

    def forward(self, s_a, s_b):
        (oa, ob), cc = self.cross(s_a, s_b)
        ya, cfa = self.ffn_a.forward(s_a + oa)
        yb, cfb = self.ffn_b.forward(s_b + ob)
        return (ya, yb), (cc, cfa, cfb)

    def backward(self, dya, dyb, cache):
        cc, cfa, cfb = cache
        dra = self.ffn_a.backward(dya, cfa)
        drb = self.ffn_b.backward(dyb, cfb)
        dsa, dsb = self.cross_backward(dra, drb, cc)
        return dra + dsa, drb + dsb

    @staticmethod
    def probs(cache):
        cc = cache[0]
        return cc[4][3], cc[5][3]


class MAM(Module):
    """Mixed attention: full self-attention over the token concatenation of both
    streams (self and cross blocks in one softmax), split back, per-stream FFN."""

    kind = "mam"

    def __init__(self, dim, heads, mlp_ratio, rng):
        self.ln = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ffn_a = _StreamFFN(dim, mlp_ratio, rng)
        self.ffn_b = _StreamFFN(dim, mlp_ratio, rng)

    def mixed(self, s_a, s_b):
        """Attention sublayer only; returns ((att_a, att_b), cache)."""
        _check_pair(s_a, s_b)
        n = s_a.shape[-2]
        x = np.concatenate([s_a, s_b], axis=-2)
        h, cl = self.ln.forward(x)
        a, ca = self.attn.forward(h)
        return (a[..., :n, :], a[..., n:, :]), (cl, ca, n)

    def mixed_backward(self, da, db, cache):
        cl, ca, n = cache
        dx = self.ln.backward(self.attn.backward(np.concatenate([da, db], axis=-2), ca), cl)
        return dx[..., :n, :], dx[..., n:, :]

    def forward(self, s_a, s_b):
        (oa, ob), cm = self.mixed(s_a, s_b)
        ya, cfa = self.ffn_a.forward(s_a + oa)
        yb, cfb = self.ffn_b.forward(s_b + ob)
        return (ya, yb), (cm, cfa, cfb)

    def backward(self, dya, dyb, cache):
        cm, cfa, cfb = cache
        dra = self.ffn_a.backward(dya, cfa)
        drb = self.ffn_b.backward(dyb, cfb)
        dsa, dsb = self.mixed_backward(dra, drb, cm)
        return dra + dsa, drb + dsb

    @staticmethod
    def probs(cache):
        return MultiHeadAttention.probs(cache[0][1])


def cam(s_a, s_b, block: CAM):
    return block.forward(s_a, s_b)


def mam(s_a, s_b, block: MAM):
    return block.forward(s_a, s_b)


class DimReduce(Module):
    """Learned affine map 2C -> C applied per token."""

    def __init__(self, channels, rng):
        self.fc = Linear(2 * channels, channels, rng)

    def forward(self, x):
        if x.shape[-1] % 2:
            raise ValueError(f"dim_reduce needs an even channel count, got {x.shape[-1]}")
        if x.shape[-1] != self.fc.weight.shape[0]:
            raise ValueError(f"dim_reduce expects {self.fc.weight.shape[0]} channels, got {x.shape[-1]}")
        return self.fc.forward(x)

    def backward(self, d, cache):
        return self.fc.backward(d, cache)


def dim_reduce(x, block: DimReduce):
    return block.forward(x)[0]


class FusionNetwork(Module):
    """Configurable fusion stack covering the full model and its ablations.

    ``use_shared``: consume shared-branch features through the early CAM pair.
    ``late``: 'mam', 'cam' or None for the K-deep stack over the stream pair.
    With ``use_shared=False`` the stack runs directly on (R_v^x, R_t^x).
    """

    def __init__(self, fcfg: FusionConfig, rng, use_shared=True, late="mam"):
        if late not in ("mam", "cam", None):
            raise ValueError(f"unknown late fusion block {late!r}")
        c = fcfg.channels
        self.use_shared = use_shared
        self.late_kind = late
        self.cfg = fcfg
        if use_shared:
            self.cam_vt = CAM(c, fcfg.heads, fcfg.mlp_ratio, rng)
            self.cam_tv = CAM(c, fcfg.heads, fcfg.mlp_ratio, rng)
            self.dr_vt = DimReduce(c, rng)
            self.dr_tv = DimReduce(c, rng)
        block = {"mam": MAM, "cam": CAM}.get(late)
        n_late = fcfg.depth if block else 0
        self.blocks = [block(c, fcfg.heads, fcfg.mlp_ratio, rng) for _ in range(n_late)]
        self.dr_out = DimReduce(c, rng)

    def forward(self, r_v, r_t, g_v=None, g_t=None):
        """Fuse branch features into ``(B, N_x, C)`` search-grid features."""
        rvx, rtx = select_search_part(r_v), select_search_part(r_t)
        _check_pair(rvx, rtx)
        cache = {"nz": r_v.n_template}
        if self.use_shared:
            if g_v is None or g_t is None:
                raise ValueError("this fusion variant needs shared-branch features")
            gvx, gtx = select_search_part(g_v), select_search_part(g_t)
            _check_pair(rvx, gvx)
            _check_pair(rvx, gtx)
            # H_vt = (R_v^x, G_t^x), H_tv = (R_t^x, G_v^x)
            c_vt, cache["cam_vt"] = self.cam_vt.forward(rvx, gtx)
            c_tv, cache["cam_tv"] = self.cam_tv.forward(rtx, gvx)
            s_vt, cache["dr_vt"] = self.dr_vt.forward(np.concatenate(c_vt, axis=-1))
            s_tv, cache["dr_tv"] = self.dr_tv.forward(np.concatenate(c_tv, axis=-1))
            pair = (s_tv, s_vt)
        else:
            pair = (rvx, rtx)
        cache["blocks"] = []
        for blk in self.blocks:
            pair, c = blk.forward(*pair)
            cache["blocks"].append(c)
        out, cache["dr_out"] = self.dr_out.forward(np.concatenate(pair, axis=-1))
        n = out.shape[-2]
        if int(round(np.sqrt(n))) ** 2 != n:
            raise ValueError(f"fused token count {n} is not a perfect square")
        return out, cache

    def backward(self, dout, cache, need_input_grad=False):
        """Backprop through the stack. With ``need_input_grad`` returns the
        gradients w.r.t. the search rows of (R_v, R_t, G_v, G_t)."""
        c = self.cfg.channels
        d = self.dr_out.backward(dout, cache["dr_out"])
        da, db = d[..., :c], d[..., c:]
        for blk, bc in zip(reversed(self.blocks), reversed(cache["blocks"])):
            da, db = blk.backward(da, db, bc)
        if self.use_shared:
            d_stv, d_svt = da, db
            dct = self.dr_tv.backward(d_stv, cache["dr_tv"])
            dcv = self.dr_vt.backward(d_svt, cache["dr_vt"])
            d_rtx, d_gvx = self.cam_tv.backward(dct[..., :c], dct[..., c:], cache["cam_tv"])
            d_rvx, d_gtx = self.cam_vt.backward(dcv[..., :c], dcv[..., c:], cache["cam_vt"])
            if need_input_grad:
                return {"r_v": d_rvx, "r_t": d_rtx, "g_v": d_gvx, "g_t": d_gtx}
            return None
        if need_input_grad:
            return {"r_v": da, "r_t": db}
        return None

    def attention_maps(self, cache, block, sample=0, head=0):
        """Attention probabilities recorded for late block ``block``."""
        blk = self.blocks[block]
        probs = blk.probs(cache["blocks"][block])
        if isinstance(probs, tuple):
            return tuple(p[sample, head] for p in probs)
        return probs[sample, head]

    def export_attention(self, cache, block, head, out_dir, sample=0):
        """Write MAM attention blocks as ``L{block}_H{head}_{aa|ab|ba|bb}``."""
        from pathlib import Path

        if self.late_kind != "mam":
            raise RuntimeError("block export is defined for MAM stacks only")
        probs = self.attention_maps(cache, block, sample, head)
        n = probs.shape[0] // 2
        blocks = dict(zip(("aa", "ab", "ba", "bb"), attention_blocks(probs, n).values()))
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, arr in blocks.items():
            stem = out_dir / f"L{block}_H{head}_{name}"
            np.savetxt(stem.with_suffix(".csv"), arr, delimiter=",", fmt="%.10g")
            write_pgm(stem.with_suffix(".pgm"), arr)
        return blocks
