import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from macft.backbone import BranchFeatures
from macft.engine.nn import MultiHeadAttention
from macft.fusion import CAM, MAM, DimReduce, FusionConfig, FusionNetwork, cam, dim_reduce, mam, select_search_part

from oracles import attention_heads, block_attention, gelu, layer_norm_rows


def _randomize(module, rng, scale=0.4):
    for p in module.parameters():
        p.data[:] = rng.normal(0, scale, size=p.shape)
    return module


def _ffn(stream, s):
    f = stream.ffn
    h = layer_norm_rows(s, stream.ln.gamma.data, stream.ln.beta.data, 1e-6)
    return s + gelu(h @ f.fc1.weight.data + f.fc1.bias.data) @ f.fc2.weight.data + f.fc2.bias.data


def _attn_args(blk, heads):
    a = blk.attn
    return a.qkv.weight.data, a.qkv.bias.data, a.proj.weight.data, a.proj.bias.data, heads


def _ln(blk, s):
    return layer_norm_rows(s, blk.ln.gamma.data, blk.ln.beta.data, 1e-6)


def test_select_search_part_drops_template_rows():
    t = np.arange(6.0)[:, None] * np.ones((1, 3))
    out = select_search_part(BranchFeatures(t, 2, 4))
    np.testing.assert_array_equal(out[:, 0], [2, 3, 4, 5])
    assert select_search_part(BranchFeatures(np.zeros((245, 8)), 49, 196)).shape == (196, 8)


def test_select_search_part_is_not_idempotent():
    with pytest.raises(ValueError):
        select_search_part(BranchFeatures(np.zeros((4, 3)), 2, 4, search_only=True))
    with pytest.raises(ValueError):
        select_search_part(np.zeros((6, 3)))


@settings(max_examples=100)
@given(st.integers(1, 5), st.integers(0, 2**31))
def test_mam_attention_equals_block_oracle(n, seed):
    rng = np.random.default_rng(seed)
    blk = _randomize(MAM(8, 2, 2, rng), rng)
    s_a, s_b = rng.normal(size=(1, n, 8)), rng.normal(size=(1, n, 8))
    (oa, ob), cache = blk.mixed(s_a, s_b)
    ra, rb = block_attention([_ln(blk, s_a[0]), _ln(blk, s_b[0])], [_ln(blk, s_a[0]), _ln(blk, s_b[0])],
                             *_attn_args(blk, 2))
    np.testing.assert_allclose(oa[0], ra, atol=1e-10)
    np.testing.assert_allclose(ob[0], rb, atol=1e-10)
    np.testing.assert_allclose(MultiHeadAttention.probs(cache[1]).sum(-1), 1.0, atol=1e-9)


def test_mam_equals_full_self_attention_over_concatenation(rng):
    blk = _randomize(MAM(8, 4, 2, rng), rng)
    s_a, s_b = rng.normal(size=(1, 4, 8)), rng.normal(size=(1, 4, 8))
    (ya, yb), _ = mam(s_a, s_b, blk)
    joint = _ln(blk, np.concatenate([s_a[0], s_b[0]]))
    att, _ = attention_heads(joint, joint, *_attn_args(blk, 4))
    np.testing.assert_allclose(ya[0], _ffn(blk.ffn_a, s_a[0] + att[:4]), atol=1e-10)
    np.testing.assert_allclose(yb[0], _ffn(blk.ffn_b, s_b[0] + att[4:]), atol=1e-10)


def test_mam_zero_query_key_weights_average_all_values(rng):
    blk = _randomize(MAM(8, 2, 2, rng), rng)
    blk.attn.qkv.weight.data[:, :16] = 0
    blk.attn.qkv.bias.data[:16] = 0
    s_a, s_b = rng.normal(size=(1, 3, 8)), rng.normal(size=(1, 3, 8))
    (oa, ob), _ = blk.mixed(s_a, s_b)
    joint = _ln(blk, np.concatenate([s_a[0], s_b[0]]))
    w, b = blk.attn.qkv.weight.data[:, 16:], blk.attn.qkv.bias.data[16:]
    mean_v = (joint @ w + b).mean(axis=0)
    expect = mean_v @ blk.attn.proj.weight.data + blk.attn.proj.bias.data
    np.testing.assert_allclose(oa[0], np.tile(expect, (3, 1)), atol=1e-12)
    np.testing.assert_allclose(ob[0], np.tile(expect, (3, 1)), atol=1e-12)


@settings(max_examples=50)
@given(st.integers(1, 4), st.integers(0, 2**31))
def test_cam_matches_cross_attention_oracle(n, seed):
    rng = np.random.default_rng(seed)
    blk = _randomize(CAM(8, 2, 2, rng), rng)
    s_a, s_b = rng.normal(size=(1, n, 8)), rng.normal(size=(1, n, 8))
    (ya, yb), cache = cam(s_a, s_b, blk)
    ha, hb = _ln(blk, s_a[0]), _ln(blk, s_b[0])
    oa, _ = attention_heads(ha, hb, *_attn_args(blk, 2))
    ob, _ = attention_heads(hb, ha, *_attn_args(blk, 2))
    np.testing.assert_allclose(ya[0], _ffn(blk.ffn_a, s_a[0] + oa), atol=1e-10)
    np.testing.assert_allclose(yb[0], _ffn(blk.ffn_b, s_b[0] + ob), atol=1e-10)
    for p in CAM.probs(cache):
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)


def test_cam_symmetric_inputs(rng):
    blk = _randomize(CAM(8, 2, 2, rng), rng)
    s = rng.normal(size=(1, 4, 8))
    (oa, ob), _ = blk.cross(s, s)
    np.testing.assert_array_equal(oa, ob)


def test_cam_single_token_passes_values_through(rng):
    blk = _randomize(CAM(8, 2, 2, rng), rng)
    s_a, s_b = rng.normal(size=(1, 1, 8)), rng.normal(size=(1, 1, 8))
    (oa, _), _ = blk.cross(s_a, s_b)
    a = blk.attn
    v = _ln(blk, s_b[0]) @ a.qkv.weight.data[:, 16:] + a.qkv.bias.data[16:]
    np.testing.assert_allclose(oa[0], v @ a.proj.weight.data + a.proj.bias.data, atol=1e-12)


@pytest.mark.parametrize("block", [CAM, MAM])
def test_blocks_reject_mismatched_streams(rng, block):
    blk = block(8, 2, 2, rng)
    with pytest.raises(ValueError, match="differ"):
        blk.forward(np.zeros((1, 4, 8)), np.zeros((1, 3, 8)))


def test_block_shapes_preserved(rng):
    (ya, yb), _ = MAM(32, 4, 4, rng).forward(rng.normal(size=(1, 64, 32)), rng.normal(size=(1, 64, 32)))
    assert ya.shape == yb.shape == (1, 64, 32)


def test_dim_reduce_examples(rng):
    dr = DimReduce(4, rng)
    x = rng.normal(size=(5, 8))
    np.testing.assert_allclose(dim_reduce(x, dr), x @ dr.fc.weight.data + dr.fc.bias.data, atol=1e-12)
    dr.fc.weight.data[:] = 0
    assert np.all(dim_reduce(x, dr) == 0) and dim_reduce(x, dr).shape == (5, 4)
    dr.fc.weight.data[:] = np.vstack([np.eye(4), np.zeros((4, 4))])
    np.testing.assert_array_equal(dim_reduce(x, dr), x[:, :4])
    with pytest.raises(ValueError, match="even"):
        dim_reduce(np.zeros((5, 7)), dr)
    with pytest.raises(ValueError):
        dim_reduce(np.zeros((5, 6)), dr)


def test_fusion_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(channels=30, heads=4)
    with pytest.raises(ValueError):
        FusionConfig(channels=32, depth=-1)


def _features(rng, n_z=16, n_x=64, c=32):
    return [BranchFeatures(rng.normal(size=(1, n_z + n_x, c)), n_z, n_x) for _ in range(4)]


def test_fusion_output_shape_desk(rng):
    net = FusionNetwork(FusionConfig(channels=32, depth=2), rng)
    out, cache = net.forward(*_features(rng))
    assert out.shape == (1, 64, 32)
    assert len(cache["blocks"]) == 2


def test_fusion_zero_attention_is_affine_trace(rng):
    net = FusionNetwork(FusionConfig(channels=8, depth=3, heads=2, mlp_ratio=2), rng)
    _randomize(net, rng)
    for blk in [net.cam_vt, net.cam_tv] + net.blocks:
        for p in list(blk.attn.parameters()) + list(blk.ffn_a.ffn.fc2.parameters()) + list(blk.ffn_b.ffn.fc2.parameters()):
            p.data[:] = 0
    r_v, r_t, g_v, g_t = _features(rng, 4, 9, 8)
    out, _ = net.forward(r_v, r_t, g_v, g_t)
    x = {k: f.tokens[0, 4:] for k, f in zip(("rv", "rt", "gv", "gt"), (r_v, r_t, g_v, g_t))}

    def dr(block, a, b):
        return np.concatenate([a, b], axis=1) @ block.fc.weight.data + block.fc.bias.data
    s_vt = dr(net.dr_vt, x["rv"], x["gt"])
    s_tv = dr(net.dr_tv, x["rt"], x["gv"])
    np.testing.assert_allclose(out[0], dr(net.dr_out, s_tv, s_vt), atol=1e-12)


def test_fusion_without_shared_runs_on_specific_streams(rng):
    net = FusionNetwork(FusionConfig(channels=32, depth=0), rng, use_shared=False, late=None)
    r_v, r_t, _, _ = _features(rng)
    out, _ = net.forward(r_v, r_t)
    ref = np.concatenate([r_v.tokens[0, 16:], r_t.tokens[0, 16:]], 1) @ net.dr_out.fc.weight.data
    np.testing.assert_allclose(out[0], ref + net.dr_out.fc.bias.data, atol=1e-12)


def test_fusion_errors(rng):
    net = FusionNetwork(FusionConfig(channels=32, depth=1), rng)
    r_v, r_t, g_v, _ = _features(rng)
    with pytest.raises(ValueError, match="shared"):
        net.forward(r_v, r_t, g_v, None)
    bad = BranchFeatures(rng.normal(size=(1, 16 + 49, 32)), 16, 49)
    with pytest.raises(ValueError):
        net.forward(r_v, bad, g_v, g_v)
    odd = [BranchFeatures(rng.normal(size=(1, 8, 32)), 2, 6) for _ in range(4)]
    with pytest.raises(ValueError, match="square"):
        net.forward(*odd)
    with pytest.raises(ValueError):
        FusionNetwork(FusionConfig(channels=32), rng, late="gru")


def test_fusion_attention_export(tmp_path, rng):
    net = FusionNetwork(FusionConfig(channels=32, depth=2), rng)
    _, cache = net.forward(*_features(rng))
    blocks = net.export_attention(cache, 1, 0, tmp_path)
    assert {p.name for p in tmp_path.iterdir()} == {f"L1_H0_{b}.{e}" for b in ("aa", "ab", "ba", "bb") for e in ("csv", "pgm")}
    full = np.block([[blocks["aa"], blocks["ab"]], [blocks["ba"], blocks["bb"]]])
    assert full.shape == (128, 128)
    np.testing.assert_allclose(full.sum(1), 1.0, atol=1e-9)
