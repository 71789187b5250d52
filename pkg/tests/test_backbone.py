import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from macft.backbone import (BLOCK_NAMES, Backbone, BranchFeatures, EncoderLayer, attention_blocks,
                            export_attention, mixed_attention, set_trainable)
from macft.config import ModelConfig
from macft.engine.nn import MultiHeadAttention
from macft.patch_embed import TokenSequence

from oracles import attention_heads, block_attention, gelu, layer_norm_rows


def _attn(rng, dim, heads, scale=0.5):
    a = MultiHeadAttention(dim, heads, rng)
    for p in a.parameters():
        p.data[:] = rng.normal(0, scale, size=p.shape)
    return a


@settings(max_examples=25)
@given(st.integers(1, 6), st.integers(1, 9), st.sampled_from([(8, 2), (8, 4), (12, 3)]), st.integers(0, 2**31))
def test_mixed_attention_matches_block_assembly(nz, nx, dh, seed):
    rng = np.random.default_rng(seed)
    dim, heads = dh
    attn = _attn(rng, dim, heads)
    z, x = rng.normal(size=(nz, dim)), rng.normal(size=(nx, dim))
    out, _ = mixed_attention(np.concatenate([z, x])[None], attn, (nz, nx))
    args = (attn.qkv.weight.data, attn.qkv.bias.data, attn.proj.weight.data, attn.proj.bias.data, heads)
    oz, ox = block_attention([z, x], [z, x], *args)
    np.testing.assert_allclose(out[0, :nz], oz, atol=1e-10)
    np.testing.assert_allclose(out[0, nz:], ox, atol=1e-10)


def test_mixed_attention_probability_blocks(rng):
    attn = _attn(rng, 8, 2)
    tokens = rng.normal(size=(1, 7, 8))
    _, cache = mixed_attention(tokens, attn, (3, 4))
    probs = MultiHeadAttention.probs(cache)[0]
    args = (attn.qkv.weight.data, attn.qkv.bias.data, attn.proj.weight.data, attn.proj.bias.data, 2)
    _, ref = attention_heads(tokens[0], tokens[0], *args)
    for h in range(2):
        np.testing.assert_allclose(probs[h], ref[h], atol=1e-12)
        blocks = attention_blocks(probs[h], 3)
        assert [b.shape for b in blocks.values()] == [(3, 3), (3, 4), (4, 3), (4, 4)]
        np.testing.assert_allclose(np.block([[blocks["zz"], blocks["zx"]], [blocks["xz"], blocks["xx"]]]), probs[h])


def test_zero_query_key_weights_give_uniform_attention(rng):
    attn = _attn(rng, 8, 2)
    attn.qkv.weight.data[:, :16] = 0
    attn.qkv.bias.data[:16] = 0
    _, cache = mixed_attention(rng.normal(size=(2, 6, 8)), attn, (2, 4))
    np.testing.assert_allclose(MultiHeadAttention.probs(cache), 1 / 6, atol=1e-15)


def test_mixed_attention_requires_partition(rng):
    attn = _attn(rng, 8, 2)
    with pytest.raises(ValueError, match="partition"):
        mixed_attention(np.zeros((1, 5, 8)), attn, None)
    with pytest.raises(ValueError):
        mixed_attention(np.zeros((1, 5, 8)), attn, (2, 2))


def test_encoder_layer_matches_oracle(rng):
    layer = EncoderLayer(8, 2, 2, rng)
    for p in layer.parameters():
        p.data[:] = rng.normal(0, 0.4, size=p.shape)
    r = rng.normal(size=(1, 6, 8))
    out, _ = layer.forward(r, (2, 4))
    a = layer.attn
    h = layer_norm_rows(r[0], layer.ln1.gamma.data, layer.ln1.beta.data, 1e-6)
    att, _ = attention_heads(h, h, a.qkv.weight.data, a.qkv.bias.data, a.proj.weight.data, a.proj.bias.data, 2)
    r_star = r[0] + att
    h2 = layer_norm_rows(r_star, layer.ln2.gamma.data, layer.ln2.beta.data, 1e-6)
    f = layer.ffn
    ffn = gelu(h2 @ f.fc1.weight.data + f.fc1.bias.data) @ f.fc2.weight.data + f.fc2.bias.data
    np.testing.assert_allclose(out[0], r_star + ffn, atol=1e-12)


def test_zero_weights_make_layer_an_identity(rng):
    layer = EncoderLayer(8, 2, 4, rng)
    for p in layer.parameters():
        p.data[:] = 0
    r = rng.normal(size=(2, 5, 8))
    out, _ = layer.forward(r, (1, 4))
    np.testing.assert_array_equal(out, r)


def test_backbone_desk_shapes(rng):
    cfg = ModelConfig()
    bb = Backbone(cfg, rng)
    feats, _ = bb.forward(rng.random((2, 16, 16, 3)), rng.random((2, 32, 32, 3)), record_attention=True)
    assert feats.tokens.shape == (2, 80, cfg.dim)
    assert len(feats.attention) == cfg.depth
    assert feats.attention[0].shape == (2, cfg.heads, 80, 80)
    np.testing.assert_allclose(feats.attention[-1].sum(axis=-1), 1.0, atol=1e-12)


def test_backbone_rejects_wrong_token_dim(rng):
    bb = Backbone(ModelConfig(), rng)
    with pytest.raises(ValueError, match="token dim"):
        bb.forward_tokens(TokenSequence(np.zeros((1, 80, 16)), 16, 64))


def test_branch_features_check_rows():
    with pytest.raises(ValueError):
        BranchFeatures(np.zeros((1, 10, 4)), 4, 5)


@pytest.mark.parametrize("depth,freeze,n_train", [(12, 8, 4), (3, 0, 3), (3, 3, 0), (3, 1, 2)])
def test_freeze_counts(rng, depth, freeze, n_train):
    bb = Backbone(ModelConfig(depth=depth), rng)
    mask = set_trainable(bb, freeze)
    assert sum(mask) == n_train
    assert [layer.any_trainable() for layer in bb.layers] == mask
    assert all(not l.any_trainable() for l in bb.layers[:freeze])
    assert bb.norm.any_trainable()
    assert not bb.embed.any_trainable()


def test_freeze_count_out_of_range(rng):
    bb = Backbone(ModelConfig(depth=3), rng)
    with pytest.raises(ValueError):
        set_trainable(bb, 4)
    with pytest.raises(ValueError):
        set_trainable(bb, -1)


def test_frozen_layers_keep_their_weights_after_backward(rng):
    bb = Backbone(ModelConfig(depth=3), rng)
    set_trainable(bb, 2)
    feats, cache = bb.forward(rng.random((1, 16, 16, 3)), rng.random((1, 32, 32, 3)))
    bb.backward(rng.normal(size=feats.tokens.shape), cache)
    assert all(p.grad is None or not np.any(p.grad) for l in bb.layers[:2] for p in l.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in bb.layers[2].parameters())


def test_export_attention(tmp_path, rng):
    bb = Backbone(ModelConfig(depth=2), rng)
    feats, _ = bb.forward(rng.random((1, 16, 16, 3)), rng.random((1, 32, 32, 3)), record_attention=True)
    blocks = export_attention(feats, 1, 3, tmp_path)
    shapes = {"zz": (16, 16), "zx": (16, 64), "xz": (64, 16), "xx": (64, 64)}
    for name in BLOCK_NAMES:
        arr = np.loadtxt(tmp_path / f"L1_H3_{name}.csv", delimiter=",", ndmin=2)
        assert arr.shape == shapes[name]
        np.testing.assert_allclose(arr, blocks[name], rtol=1e-9)
        pgm = (tmp_path / f"L1_H3_{name}.pgm").read_bytes()
        assert pgm.startswith(f"P5\n{shapes[name][1]} {shapes[name][0]}\n255\n".encode())
    full = np.block([[blocks["zz"], blocks["zx"]], [blocks["xz"], blocks["xx"]]])
    np.testing.assert_allclose(full.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(full, feats.attention[1][0, 3])


def test_export_without_recording(tmp_path, rng):
    bb = Backbone(ModelConfig(depth=1), rng)
    feats, _ = bb.forward(rng.random((1, 16, 16, 3)), rng.random((1, 32, 32, 3)))
    with pytest.raises(RuntimeError, match="record_attention"):
        export_attention(feats, 0, 0, tmp_path)
