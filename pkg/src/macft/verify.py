"""Gradient verification suite: every differentiable op, layer and loss, plus
the end-to-end training losses of each stage, against central differences.

Each check builds random inputs from a seed, wraps everything differentiable
(inputs included) as tensors and hands a closure to :func:`grad_check`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .backbone import EncoderLayer, mixed_attention
from .config import ModelConfig, tiny_config
from .corner_head import CornerHead, soft_argmax, soft_argmax_backward
from .engine import ops
from .engine.gradcheck import GradCheckReport, grad_check
from .engine.nn import Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention
from .engine.tensor import Tensor
from .fusion import CAM, MAM, DimReduce, FusionConfig, FusionNetwork
from .model import build_variant
from .objectives import LossWeights, composite_loss_stage2, giou_loss, l1_box_loss
from .patch_embed import TokenSequence
from .pipeline import training
from .shared_branch import kl_divergence_loss

H = 1e-5
TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    report: GradCheckReport
    seconds: float

    @property
    def passed(self):
        return self.report.passed


def _t(rng, shape, scale=1.0, name="x"):
    return Tensor(rng.normal(0, scale, size=shape), True, name)


def _weight(rng, shape):
    """Random read-out weights scaled so the probe loss stays O(1); rounding
    noise in the central difference then sits far below the tolerance."""
    return rng.normal(size=shape) / np.sqrt(np.prod(shape))


# -- single ops ----------------------------------------------------------------

def check_matmul(rng):
    a, b = _t(rng, (2, 3, 4), name="a"), _t(rng, (4, 5), name="b")
    w = _weight(rng, (2, 3, 5))

    def f(g):
        y = ops.matmul(a.data, b.data)
        if g:
            da, db = ops.matmul_backward(w, a.data, b.data)
            a.accumulate(da)
            b.accumulate(db)
        return (y * w).sum()
    return f, [a, b]


def check_softmax(rng):
    x = _t(rng, (3, 7), 2.0)
    w = _weight(rng, (3, 7))

    def f(g):
        y = ops.softmax(x.data)
        if g:
            x.accumulate(ops.softmax_backward(w, y))
        return (y * w).sum()
    return f, [x]


def check_layer_norm(rng):
    x = _t(rng, (4, 6), 1.5)
    gamma, beta = _t(rng, 6, name="gamma"), _t(rng, 6, name="beta")
    w = _weight(rng, (4, 6))

    def f(g):
        y, c = ops.layer_norm(x.data, gamma.data, beta.data)
        if g:
            dx, dg, db = ops.layer_norm_backward(w, c)
            x.accumulate(dx)
            gamma.accumulate(dg)
            beta.accumulate(db)
        return (y * w).sum()
    return f, [x, gamma, beta]


def check_gelu(rng):
    x = _t(rng, (5, 5), 2.0)
    w = _weight(rng, (5, 5))

    def f(g):
        if g:
            x.accumulate(ops.gelu_backward(w, x.data))
        return (ops.gelu(x.data) * w).sum()
    return f, [x]


def check_conv2d(rng):
    x = _t(rng, (2, 5, 5, 3))
    k, b = _t(rng, (3, 3, 3, 4), name="k"), _t(rng, 4, name="bias")
    w = _weight(rng, (2, 5, 5, 4))

    def f(g):
        y, c = ops.conv2d(x.data, k.data, b.data, padding=1)
        if g:
            dx, dk, db = ops.conv2d_backward(w, c)
            x.accumulate(dx)
            k.accumulate(dk)
            b.accumulate(db)
        return (y * w).sum()
    return f, [x, k, b]


def check_soft_argmax(rng):
    m = _t(rng, (2, 4, 4), 2.0)
    w = _weight(rng, (2, 2))

    def f(g):
        xy, c = soft_argmax(m.data)
        if g:
            m.accumulate(soft_argmax_backward(w, c))
        return (xy * w).sum()
    return f, [m]


# -- layers --------------------------------------------------------------------

def _module_check(module, x, forward, backward, rng):
    """Generic: L = sum(forward(x) * W); params + input."""
    y0 = forward(x.data)[0]
    w = _weight(rng, np.shape(y0))

    def f(g):
        y, c = forward(x.data)
        if g:
            dx = backward(w, c)
            if dx is not None:
                x.accumulate(dx)
        return (y * w).sum()
    return f, [x] + module.parameters()


def check_linear(rng):
    m = Linear(6, 4, rng, std=0.5)
    return _module_check(m, _t(rng, (3, 6)), m.forward, m.backward, rng)


def check_layer_norm_module(rng):
    m = LayerNorm(6)
    m.gamma.data[:] = rng.normal(size=6)
    return _module_check(m, _t(rng, (2, 3, 6)), m.forward, m.backward, rng)


def check_feed_forward(rng):
    m = FeedForward(6, 12, rng)
    for p in m.parameters():
        p.data += rng.normal(0, 0.3, size=p.shape)
    return _module_check(m, _t(rng, (2, 3, 6)), m.forward, m.backward, rng)


def check_conv_module(rng):
    m = Conv2d(4, 2, rng)
    return _module_check(m, _t(rng, (1, 4, 4, 4)), m.forward, m.backward, rng)


def _perturb(module, rng, scale=0.3):
    for p in module.parameters():
        p.data += rng.normal(0, scale, size=p.shape)
    return module


def check_attention(rng):
    m = _perturb(MultiHeadAttention(8, 2, rng), rng)
    return _module_check(m, _t(rng, (2, 5, 8)), m.forward, m.backward, rng)


def check_mixed_attention(rng):
    m = _perturb(MultiHeadAttention(8, 2, rng), rng)
    part = TokenSequence(np.zeros((1, 6, 8)), 2, 4).partition
    return _module_check(m, _t(rng, (1, 6, 8)), lambda x: mixed_attention(x, m, part), m.backward, rng)


def check_encoder_layer(rng):
    m = _perturb(EncoderLayer(8, 2, 2, rng), rng)
    part = TokenSequence(np.zeros((1, 6, 8)), 2, 4).partition
    return _module_check(m, _t(rng, (1, 6, 8)), lambda x: m.forward(x, part), m.backward, rng)


def _pair_check(module, rng, shape):
    a, b = _t(rng, shape, name="s_a"), _t(rng, shape, name="s_b")
    wa, wb = _weight(rng, shape), _weight(rng, shape)

    def f(g):
        (ya, yb), c = module.forward(a.data, b.data)
        if g:
            da, db = module.backward(wa, wb, c)
            a.accumulate(da)
            b.accumulate(db)
        return (ya * wa).sum() + (yb * wb).sum()
    return f, [a, b] + module.parameters()


def check_cam(rng):
    return _pair_check(_perturb(CAM(8, 2, 2, rng), rng), rng, (2, 4, 8))


def check_mam(rng):
    return _pair_check(_perturb(MAM(8, 2, 2, rng), rng), rng, (2, 4, 8))


def check_dim_reduce(rng):
    m = _perturb(DimReduce(8, rng), rng)
    return _module_check(m, _t(rng, (2, 4, 16)), m.forward, m.backward, rng)


def check_corner_head(rng):
    m = CornerHead(16, rng)
    return _module_check(m, _t(rng, (2, 16, 16)), m.forward, m.backward, rng)


def check_fusion_network(rng):
    from .backbone import BranchFeatures
    fcfg = FusionConfig(16, depth=2, heads=2, mlp_ratio=2)
    net = _perturb(FusionNetwork(fcfg, rng, use_shared=True, late="mam"), rng, 0.1)
    nz, nx = 2, 4
    ins = {k: _t(rng, (2, nz + nx, 16), name=k) for k in ("r_v", "r_t", "g_v", "g_t")}
    feats = lambda: {k: BranchFeatures(t.data, nz, nx) for k, t in ins.items()}
    w = _weight(rng, (2, nx, 16))

    def f(g):
        out, c = net.forward(**feats())
        if g:
            grads = net.backward(w, c, need_input_grad=True)
            for k, t in ins.items():
                d = np.zeros_like(t.data)
                d[:, nz:] = grads[k]
                t.accumulate(d)
        return (out * w).sum()
    return f, list(ins.values()) + net.parameters()


# -- losses --------------------------------------------------------------------

def _random_boxes(rng, n):
    c = rng.uniform(0.3, 0.7, size=(n, 2))
    s = rng.uniform(0.1, 0.5, size=(n, 2))
    return np.concatenate([c, s], axis=1)


def check_giou(rng):
    b = Tensor(_random_boxes(rng, 6), True, "b")
    t = _random_boxes(rng, 6)

    def f(g):
        loss, grad = giou_loss(b.data, t, return_grad=True)
        if g:
            b.accumulate(grad)
        return loss.sum()
    return f, [b]


def check_l1(rng):
    b = Tensor(_random_boxes(rng, 6), True, "b")
    t = _random_boxes(rng, 6)

    def f(g):
        loss, grad = l1_box_loss(b.data, t, return_grad=True)
        if g:
            b.accumulate(grad)
        return loss.sum()
    return f, [b]


def check_kl(rng):
    gv, gt = _t(rng, (2, 5, 8), name="g_v"), _t(rng, (2, 5, 8), name="g_t")

    def f(g):
        loss, dv, dt = kl_divergence_loss(gv.data, gt.data, return_grad=True)
        if g:
            gv.accumulate(dv)
            gt.accumulate(dt)
        return loss
    return f, [gv, gt]


def check_stage2_composite(rng):
    bv = Tensor(_random_boxes(rng, 6), True, "b_v")
    bt = Tensor(_random_boxes(rng, 6), True, "b_t")
    t = _random_boxes(rng, 6)
    w = LossWeights()

    def f(g):
        total, gv, gt, _ = composite_loss_stage2(bv.data, t, bt.data, t, 0.01, w, return_grad=True)
        if g:
            bv.accumulate(gv)
            bt.accumulate(gt)
        return total.sum()
    return f, [bv, bt]


# -- end to end ----------------------------------------------------------------

def _e2e_batch(rng, cfg: ModelConfig, n=2):
    def img(size):
        return rng.uniform(0, 1, size=(n, size, size, cfg.channels))
    c = rng.uniform(0.35, 0.65, size=(n, 2))
    s = rng.uniform(0.15, 0.35, size=(n, 2))
    return {"z_rgb": img(cfg.template_size), "z_tir": img(cfg.template_size),
            "x_rgb": img(cfg.search_size), "x_tir": img(cfg.search_size),
            "gt": np.concatenate([c, s], axis=1)}


def _e2e_model(rng, cfg):
    model = build_variant("full", cfg, rng)
    # lift the small init so the check probes a non-trivial point
    for p in model.parameters():
        p.data += rng.normal(0, 0.05, size=p.shape)
    model.set_trainable(True)
    return model


def check_end_to_end_stage13(rng, cfg=None):
    """Stage-3 loss of the full variant, backpropagated through every branch."""
    cfg = cfg or tiny_config()
    model = _e2e_model(rng, cfg)
    batch = _e2e_batch(rng, cfg)
    w = LossWeights()

    def f(g):
        corners, cache = model.forward_fused(batch["z_rgb"], batch["x_rgb"], batch["z_tir"], batch["x_tir"])
        loss, dc = training.box_loss(corners, batch["gt"], w)
        if g:
            model.backward_fused(dc, cache, through_backbones=True)
        return loss
    params = {n: p for n, p in model.named_parameters() if not n.startswith("head_")}
    return f, params


def check_end_to_end_stage2(rng, cfg=None):
    """Stage-2 loss (min of the two box losses + weighted KL) through the shared branch."""
    cfg = cfg or tiny_config()
    model = _e2e_model(rng, cfg)
    batch = _e2e_batch(rng, cfg)
    # a small KL weight keeps both terms visible in the check
    w = LossWeights(kl=5.0)

    def f(g):
        if g:
            return training._step_stage2(model, batch, w)[0]
        return _stage2_value(model, batch, w)
    params = {n: p for n, p in model.named_parameters() if n.startswith(("shared.", "head_shared."))}
    return f, params


def _stage2_value(model, batch, w):
    g_v, _ = model.shared.forward(batch["z_rgb"], batch["x_rgb"])
    g_t, _ = model.shared.forward(batch["z_tir"], batch["x_tir"])
    nz = g_v.n_template
    cv, _ = model.head_shared.forward(g_v.tokens[:, nz:])
    ct, _ = model.head_shared.forward(g_t.tokens[:, nz:])
    kl = kl_divergence_loss(g_v.tokens, g_t.tokens)
    return training.stage2_loss(cv, ct, batch["gt"], kl, w)[0]


def check_end_to_end_stage1(rng, cfg=None):
    cfg = cfg or tiny_config()
    model = _e2e_model(rng, cfg)
    batch = _e2e_batch(rng, cfg)
    w = LossWeights()

    def f(g):
        return training._step_stage1(model, "rgb", batch, w)[0] if g else \
            training.box_loss(model.forward_branch("rgb", batch["z_rgb"], batch["x_rgb"])[0], batch["gt"], w)[0]
    params = {n: p for n, p in model.named_parameters() if n.startswith(("rgb.", "head_rgb."))}
    return f, params


CHECKS = {
    "matmul": check_matmul,
    "softmax": check_softmax,
    "layer_norm": check_layer_norm,
    "gelu": check_gelu,
    "conv2d": check_conv2d,
    "soft_argmax": check_soft_argmax,
    "linear": check_linear,
    "layer_norm_module": check_layer_norm_module,
    "feed_forward": check_feed_forward,
    "conv_module": check_conv_module,
    "attention": check_attention,
    "mixed_attention": check_mixed_attention,
    "encoder_layer": check_encoder_layer,
    "cam": check_cam,
    "mam": check_mam,
    "dim_reduce": check_dim_reduce,
    "fusion_network": check_fusion_network,
    "corner_head": check_corner_head,
    "giou_loss": check_giou,
    "l1_loss": check_l1,
    "kl_loss": check_kl,
    "stage2_composite": check_stage2_composite,
    "end_to_end_stage1": check_end_to_end_stage1,
    "end_to_end_stage2": check_end_to_end_stage2,
    "end_to_end_stage3": check_end_to_end_stage13,
}

# coordinates probed per tensor (sampled); small op checks probe everything
MAX_COORDS = {"end_to_end_stage1": 2, "end_to_end_stage2": 2, "end_to_end_stage3": 1,
              "fusion_network": 8}
DEFAULT_MAX_COORDS = 24


def run_suite(seeds=(0, 1, 2, 3, 4), names=None, h=H, tol=TOL, log=None):
    """Run every check for every seed; returns a list of CheckResult."""
    results = []
    for name in names or CHECKS:
        for seed in seeds:
            rng = np.random.default_rng([seed, 7])
            t0 = time.perf_counter()
            f, params = CHECKS[name](rng)
            rep = grad_check(f, params, h=h, tol=tol, max_coords=MAX_COORDS.get(name, DEFAULT_MAX_COORDS), seed=seed)
            res = CheckResult(name, seed, rep, time.perf_counter() - t0)
            results.append(res)
            if log is not None:
                log(f"{name:<20} seed {seed}: {rep}")
    return results
