"""Assembled tracker model and the ablation variants built from it."""

from __future__ import annotations

import numpy as np

from .backbone import Backbone
from .config import VARIANTS, ModelConfig
from .corner_head import CornerHead
from .engine.nn import Module
from .fusion import FusionConfig, FusionNetwork, select_search_part

# variant -> (rgb branch, tir branch, shared branch, late block kind, uses fusion)
_LAYOUT = {
    "b-rgb": (True, False, False, None, False),
    "b-t": (False, True, False, None, False),
    "dm": (True, True, False, None, True),
    "dm-cam": (True, True, False, "cam", True),
    "dm-mam": (True, True, False, "mam", True),
    "dm-cam-com": (True, True, True, "cam", True),
    "full": (True, True, True, "mam", True),
}


_COMPONENT_IDS = {name: i for i, name in enumerate(
    ("rgb", "head_rgb", "tir", "head_tir", "shared", "head_shared", "fusion", "head"))}


class CountingBackbone(Backbone):
    """Backbone that counts its forward calls (lets tests prove a branch is idle)."""

    def __init__(self, cfg, rng):
        super().__init__(cfg, rng)
        self.calls = 0

    def forward(self, z_img, x_img, record_attention=False):
        self.calls += 1
        return super().forward(z_img, x_img, record_attention)


def _pad_template_rows(d_search, n_template):
    b, _, c = d_search.shape
    return np.concatenate([np.zeros((b, n_template, c)), d_search], axis=1)


class MACFTModel(Module):
    """All parameter groups a variant needs, named for checkpointing.

    Stage heads (``head_rgb``, ``head_tir``, ``head_shared``) exist for the
    backbone training stages; ``head`` sits behind the fusion network.
    ``stage_heads=False`` skips them for inference-only models.
    """

    def __init__(self, cfg: ModelConfig, rng, stage_heads=True):
        self.cfg = cfg
        self.variant = cfg.variant
        use_rgb, use_tir, use_shared, late, fused = _LAYOUT[cfg.variant]
        self.stages_done = set()
        # every component draws from its own stream, so parts shared between
        # variants start identical for the same master rng
        root = int(rng.integers(2**63))
        sub = lambda name: np.random.default_rng([root, _COMPONENT_IDS[name]])
        if use_rgb:
            self.rgb = CountingBackbone(cfg, sub("rgb"))
            if stage_heads or not fused:
                self.head_rgb = CornerHead(cfg.dim, sub("head_rgb"))
        if use_tir:
            self.tir = CountingBackbone(cfg, sub("tir"))
            if stage_heads or not fused:
                self.head_tir = CornerHead(cfg.dim, sub("head_tir"))
        if use_shared:
            self.shared = CountingBackbone(cfg, sub("shared"))
            if stage_heads:
                self.head_shared = CornerHead(cfg.dim, sub("head_shared"))
        if fused:
            fcfg = FusionConfig(cfg.dim, cfg.mam_depth, cfg.heads, cfg.mlp_ratio)
            self.fusion = FusionNetwork(fcfg, sub("fusion"), use_shared=use_shared, late=late)
            self.head = CornerHead(cfg.dim, sub("head"))

    # -- structure -----------------------------------------------------------
    @property
    def uses_fusion(self):
        return _LAYOUT[self.variant][4]

    @property
    def uses_shared(self):
        return _LAYOUT[self.variant][2]

    def modalities(self):
        return [m for m, on in (("rgb", _LAYOUT[self.variant][0]), ("tir", _LAYOUT[self.variant][1])) if on]

    def required_stages(self):
        stages = [1]
        if self.uses_shared:
            stages.append(2)
        if self.uses_fusion:
            stages.append(3)
        return stages

    def branches(self):
        return {name: getattr(self, name) for name in ("rgb", "tir", "shared") if hasattr(self, name)}

    def param_groups(self):
        """(backbone tensors, everything else)."""
        backbone_ids = {id(p) for b in self.branches().values() for p in b.parameters()}
        params = self.parameters()
        return ([p for p in params if id(p) in backbone_ids],
                [p for p in params if id(p) not in backbone_ids])

    def state_dict(self, prefix=""):
        out = super().state_dict(prefix)
        out["__stages__"] = np.array(sorted(self.stages_done), dtype=np.float64)
        return out

    def load_state_dict(self, state, prefix="", strict=True):
        state = dict(state)
        stages = state.pop("__stages__", np.zeros(0))
        super().load_state_dict(state, prefix, strict)
        self.stages_done = {int(s) for s in np.asarray(stages).reshape(-1)}

    def reset_calls(self):
        for b in self.branches().values():
            b.calls = 0

    # -- forward paths ---------------------------------------------------------
    def forward_branch(self, modality, z, x, head=True):
        """Stage-1 path: one specific branch and its own corner head."""
        branch = getattr(self, modality)
        feats, cb = branch.forward(z, x)
        if not head:
            return feats, cb
        hd = getattr(self, f"head_{modality}")
        corners, ch = hd.forward(select_search_part(feats))
        return corners, (feats, cb, ch)

    def backward_branch(self, modality, dcorners, cache):
        feats, cb, ch = cache
        dsearch = getattr(self, f"head_{modality}").backward(dcorners, ch)
        getattr(self, modality).backward(_pad_template_rows(dsearch, feats.n_template), cb)

    def forward_fused(self, z_v, x_v, z_t, x_t, record_attention=False):
        """Fused path for every variant that has a fusion network."""
        r_v, c_rv = self.rgb.forward(z_v, x_v, record_attention)
        r_t, c_rt = self.tir.forward(z_t, x_t, record_attention)
        g_v = g_t = c_gv = c_gt = None
        if self.uses_shared:
            g_v, c_gv = self.shared.forward(z_v, x_v, record_attention)
            g_t, c_gt = self.shared.forward(z_t, x_t, record_attention)
        fused, cf = self.fusion.forward(r_v, r_t, g_v, g_t)
        corners, ch = self.head.forward(fused)
        feats = {"r_v": r_v, "r_t": r_t, "g_v": g_v, "g_t": g_t, "fused": fused}
        return corners, (feats, (c_rv, c_rt, c_gv, c_gt), cf, ch)

    def backward_fused(self, dcorners, cache, through_backbones=False):
        feats, (c_rv, c_rt, c_gv, c_gt), cf, ch = cache
        dfused = self.head.backward(dcorners, ch)
        grads = self.fusion.backward(dfused, cf, need_input_grad=through_backbones)
        if not through_backbones:
            return
        nz = feats["r_v"].n_template
        self.rgb.backward(_pad_template_rows(grads["r_v"], nz), c_rv)
        self.tir.backward(_pad_template_rows(grads["r_t"], nz), c_rt)
        if self.uses_shared:
            # both shared passes accumulate into the same parameters
            self.shared.backward(_pad_template_rows(grads["g_v"], nz), c_gv)
            self.shared.backward(_pad_template_rows(grads["g_t"], nz), c_gt)

    def predict_corners(self, z_v, x_v, z_t, x_t):
        """Inference: normalised search-crop corners ``(B, 4)`` for this variant."""
        if self.variant == "b-rgb":
            return self.forward_branch("rgb", z_v, x_v)[0]
        if self.variant == "b-t":
            return self.forward_branch("tir", z_t, x_t)[0]
        return self.forward_fused(z_v, x_v, z_t, x_t)[0]


def build_variant(variant, cfg: ModelConfig, rng=None, params=None, stage_heads=True):
    """Assemble the model for ``variant`` and optionally load ``params``.

    ``params`` is a name -> array mapping (e.g. from a checkpoint). Tensors not
    used by the variant are ignored; tensors the variant needs must be present.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    if rng is None:
        rng = np.random.default_rng(0)
    model = MACFTModel(cfg.replace(variant=variant), rng, stage_heads=stage_heads)
    if params is not None:
        wanted = {name for name, _ in model.named_parameters()}
        missing = sorted(wanted - set(params))
        if missing:
            raise KeyError(f"variant {variant} needs tensors missing from params: {missing[:3]}")
        model.load_state_dict({k: v for k, v in params.items() if k in wanted or k == "__stages__"})
    return model
