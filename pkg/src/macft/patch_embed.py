"""Image serialisation into token sequences, and positional encodings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ops
from .engine.nn import FeedForward, Linear, Module


@dataclass
class TokenSequence:
    """Token matrix with its template/search partition (template first)."""

    tokens: np.ndarray
    n_template: int
    n_search: int

    def __post_init__(self):
        n = self.tokens.shape[-2]
        if n not in (self.n_template + self.n_search,):
            raise ValueError(
                f"{n} tokens but partition says {self.n_template} + {self.n_search}")

    @property
    def partition(self):
        return self.n_template, self.n_search


def patchify(img, p):
    """Split ``(…, H, W, C)`` images into row-major ``(…, N, P*P*C)`` patches."""
    img = np.asarray(img, dtype=np.float64)
    *lead, h, w, c = img.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = img.reshape(*lead, gh, p, gw, p, c)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, gh * gw, p * p * c)


def unpatchify(patches, p, h, w, c):
    """Inverse of :func:`patchify` (used by tests)."""
    patches = np.asarray(patches)
    *lead, n, _ = patches.shape
    gh, gw = h // p, w // p
    if n != gh * gw:
        raise ValueError(f"{n} patches cannot tile {h}x{w} with P={p}")
    nl = len(lead)
    x = patches.reshape(*lead, gh, gw, p, p, c)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, h, w, c)


def embed(patches, weight, bias):
    """Affine projection of flattened patches to the model dimension."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape[-1] != np.shape(weight)[0]:
        raise ValueError(f"patch length {patches.shape[-1]} != projection input {np.shape(weight)[0]}")
    return ops.matmul(patches, np.asarray(weight)) + np.asarray(bias)


def sincos_table(grid_h, grid_w, dim):
    """Fixed 2D sinusoidal table of shape ``(grid_h*grid_w, dim)``.

    Half the channels encode the column index, half the row index; each half is
    ``[sin(pos*w_i), cos(pos*w_i)]`` with ``w_i = 10000^(-i/(dim/4))``.
    """
    if dim % 4:
        raise ValueError(f"sinusoidal table needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    rows, cols = np.meshgrid(np.arange(grid_h, dtype=np.float64),
                             np.arange(grid_w, dtype=np.float64), indexing="ij")

    def enc(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([enc(cols), enc(rows)], axis=1)


def search_pos_encoding(search_size, patch, dim):
    g = search_size // patch
    return sincos_table(g, g, dim)


def patch_centers(size, patch):
    """Normalised (u, v) centre of each patch, row-major, shape (N, 2)."""
    g = size // patch
    c = (np.arange(g) + 0.5) / g
    v, u = np.meshgrid(c, c, indexing="ij")
    return np.stack([u.reshape(-1), v.reshape(-1)], axis=1)


class TemplatePosMLP(Module):
    """Two affine layers with a GELU between, mapping patch centres to D-vectors."""

    def __init__(self, template_size, patch, dim, rng, hidden=None):
        self.coords = patch_centers(template_size, patch)
        self.mlp = FeedForward(2, hidden or dim, rng, out_dim=dim)

    def forward(self):
        return self.mlp.forward(self.coords)

    def backward(self, dy, cache):
        self.mlp.backward(dy, cache, need_input_grad=False)


def template_pos_encoding(mlp: TemplatePosMLP):
    return mlp.forward()[0]


class PatchEmbed(Module):
    """Patch projection plus positional encodings for one backbone branch."""

    def __init__(self, cfg, rng):
        self.patch = cfg.patch
        self.proj = Linear(cfg.patch * cfg.patch * cfg.channels, cfg.dim, rng)
        self.template_pos = TemplatePosMLP(cfg.template_size, cfg.patch, cfg.dim, rng)
        self.search_pos = search_pos_encoding(cfg.search_size, cfg.patch, cfg.dim)

    def forward(self, z_img, x_img):
        zp = patchify(z_img, self.patch)
        xp = patchify(x_img, self.patch)
        nz, nx = zp.shape[-2], xp.shape[-2]
        if nx != self.search_pos.shape[0]:
            raise ValueError(f"search image gives {nx} patches, expected {self.search_pos.shape[0]}")
        tokens, cproj = self.proj.forward(np.concatenate([zp, xp], axis=-2))
        pz, cpos = self.template_pos.forward()
        if nz != pz.shape[0]:
            raise ValueError(f"template image gives {nz} patches, expected {pz.shape[0]}")
        tokens = tokens + np.concatenate([pz, self.search_pos], axis=0)
        return TokenSequence(tokens, nz, nx), (cproj, cpos, nz)

    def backward(self, dtokens, cache):
        cproj, cpos, nz = cache
        if self.template_pos.any_trainable():
            dpz = dtokens[..., :nz, :]
            self.template_pos.backward(dpz.reshape(-1, nz, dpz.shape[-1]).sum(axis=0), cpos)
        if self.proj.any_trainable():
            self.proj.backward(dtokens, cproj, need_input_grad=False)
