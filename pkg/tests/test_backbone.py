import math

import numpy as np
import pytest

from lfvit.backbone import (ClassAttentionTrace, TokenSequence, classify, downsample_half, embed,
                            encode, interpolate_pos_embed)
from lfvit.config import ModelConfig
from lfvit.errors import DimensionError
from lfvit.weights import expected_shapes, init_weights

from conftest import random_image


def test_downsample_constant():
    np.testing.assert_array_equal(downsample_half(np.full((3, 4, 4), 0.3, np.float32)), np.full((3, 2, 2), 0.3, np.float32))


def test_downsample_block_mean():
    img = np.array([[[1, 2], [3, 5]]] * 3, dtype=np.float32)
    assert downsample_half(img)[0, 0, 0] == 2.75


def test_downsample_matches_loop(rng):
    img = rng.random((3, 8, 8), dtype=np.float32)
    expected = np.zeros((3, 4, 4), np.float32)
    for c in range(3):
        for i in range(4):
            for j in range(4):
                s = img[c, 2 * i, 2 * j] + img[c, 2 * i, 2 * j + 1] + img[c, 2 * i + 1, 2 * j] + img[c, 2 * i + 1, 2 * j + 1]
                expected[c, i, j] = s * np.float32(0.25)
    np.testing.assert_array_equal(downsample_half(img), expected)


def test_downsample_rejects_odd():
    with pytest.raises(DimensionError):
        downsample_half(np.zeros((3, 5, 4)))


def test_embed_zero_image(tiny_cfg, tiny_weights):
    w = tiny_weights.replace(pos_embed=np.zeros_like(tiny_weights["pos_embed"]))
    seq = embed(np.zeros((3, 56, 56), np.float32), w, tiny_cfg)
    np.testing.assert_array_equal(seq.tokens[0], w["cls_token"])
    np.testing.assert_allclose(seq.tokens[1:], np.broadcast_to(w["patch_bias"], (196, tiny_cfg.dim)))


@pytest.mark.parametrize("side,n,g", [(224, 196, 14), (112, 49, 7)])
def test_embed_token_counts_deit_geometry(side, n, g):
    cfg = ModelConfig(depth=3, dim=8, heads=2, patch=16, image_side=224, classes=4)
    seq = embed(np.zeros((3, side, side), np.float32), init_weights(cfg, 0), cfg)
    assert seq.n_patches == n and (seq.grid_rows, seq.grid_cols) == (g, g)


def test_embed_one_hot_pixel(tiny_cfg, tiny_weights):
    w = tiny_weights.replace(patch_bias=np.zeros(tiny_cfg.dim))
    p = tiny_cfg.patch
    img = np.zeros((3, 56, 56), np.float32)
    c, y, x = 2, 13, 22
    img[c, y, x] = 1.0
    seq = embed(img, w, tiny_cfg)
    token = (y // p) * tiny_cfg.fine_side + x // p
    row = ((y % p) * p + x % p) * 3 + c
    np.testing.assert_allclose(seq.tokens[1 + token], w["patch_proj"][row] + w["pos_embed"][1 + token], atol=1e-6)
    others = np.delete(seq.tokens[1:], token, axis=0)
    np.testing.assert_allclose(others, np.delete(w["pos_embed"][1:], token, axis=0), atol=1e-6)


def test_embed_rejects_bad_sides(tiny_cfg, tiny_weights):
    with pytest.raises(DimensionError):
        embed(np.zeros((3, 30, 30)), tiny_weights, tiny_cfg)
    with pytest.raises(DimensionError):
        embed(np.zeros((3, 40, 40)), tiny_weights, tiny_cfg)


def test_half_resolution_pos_embed_is_block_mean(rng):
    pos = rng.normal(size=(197, 3)).astype(np.float32)
    half = interpolate_pos_embed(pos, 7)
    grid = pos[1:].reshape(14, 14, 3)
    block = grid.reshape(7, 2, 7, 2, 3).mean(axis=(1, 3)).reshape(49, 3)
    np.testing.assert_array_equal(half[0], pos[0])
    np.testing.assert_allclose(half[1:], block, atol=1e-6)


def test_both_resolutions_share_one_projection(tiny_cfg, tiny_weights):
    img = random_image(tiny_cfg)
    full = embed(img, tiny_weights, tiny_cfg)
    half = embed(downsample_half(img), tiny_weights, tiny_cfg)
    # the patch token is affine in its pixels through the same projection
    assert full.n_patches == 4 * half.n_patches
    proj = tiny_weights["patch_proj"]
    assert proj is tiny_weights["patch_proj"] and not proj.flags.writeable


def _toy_setup():
    cfg = ModelConfig(depth=1, dim=2, heads=1, patch=1, image_side=2, classes=3, region=1)
    w = init_weights(cfg, 0)
    s = 0.7
    ffn1 = np.array([[0.5, -0.3, 0.2, 0.1, 0.0, 0.4, -0.2, 0.3],
                     [0.1, 0.2, -0.4, 0.3, 0.6, -0.1, 0.2, 0.0]], np.float32)
    ffn2 = np.array([[0.2, -0.1], [0.3, 0.1], [-0.2, 0.4], [0.1, 0.1],
                     [0.0, -0.3], [0.5, 0.2], [-0.1, 0.0], [0.2, 0.3]], np.float32)
    eye = np.eye(2, dtype=np.float32) * s
    zeros2 = np.zeros(2, np.float32)
    w = w.replace(**{
        "blocks.0.wq": eye, "blocks.0.wk": eye, "blocks.0.wv": eye, "blocks.0.wo": eye,
        "blocks.0.bq": zeros2, "blocks.0.bk": zeros2, "blocks.0.bv": zeros2, "blocks.0.bo": zeros2,
        "blocks.0.fc1": ffn1, "blocks.0.fc1_b": np.zeros(8), "blocks.0.fc2": ffn2, "blocks.0.fc2_b": zeros2,
    })
    return cfg, w, s, ffn1, ffn2


def _hand_block(z, s, ffn1, ffn2, eps=1e-6):
    """One pre-norm block on a list of 2-vectors, scalar Python only."""
    def ln(v):
        mu = sum(v) / len(v)
        var = sum((x - mu) ** 2 for x in v) / len(v)
        return [(x - mu) / math.sqrt(var + eps) for x in v]

    def gelu(x):
        return 0.5 * x * (1 + math.erf(x / math.sqrt(2)))

    x = [ln(t) for t in z]
    q = [[s * a for a in t] for t in x]
    k, v = q, q
    attn = []
    for qi in q:
        scores = [sum(a * b for a, b in zip(qi, kj)) / math.sqrt(2) for kj in k]
        e = [math.exp(sc - max(scores)) for sc in scores]
        attn.append([x_ / sum(e) for x_ in e])
    heads = [[sum(attn[i][j] * v[j][d] for j in range(len(v))) for d in range(2)] for i in range(len(q))]
    z1 = [[z[i][d] + s * heads[i][d] for d in range(2)] for i in range(len(z))]
    out = []
    for t in z1:
        h = ln(t)
        hidden = [gelu(sum(h[d] * float(ffn1[d][u]) for d in range(2))) for u in range(8)]
        out.append([t[d] + sum(hidden[u] * float(ffn2[u][d]) for u in range(8)) for d in range(2)])
    return out, attn


def test_encode_matches_hand_evaluated_block():
    cfg, w, s, ffn1, ffn2 = _toy_setup()
    z = [[0.3, -1.2], [1.5, 0.4]]
    seq = TokenSequence(np.array(z, np.float32), 1, 1)
    out, trace = encode(seq, w, cfg)
    expected, attn = _hand_block(z, s, ffn1, ffn2)
    np.testing.assert_allclose(out.tokens, expected, atol=1e-5)
    np.testing.assert_allclose(trace.per_layer[0], attn[0], atol=1e-5)


def test_encode_attention_rows_normalised(tiny_cfg, tiny_weights):
    seq = embed(random_image(tiny_cfg), tiny_weights, tiny_cfg)
    _, trace = encode(seq, tiny_weights, tiny_cfg, keep_attention=True)
    assert trace.per_layer.shape == (tiny_cfg.depth, 197)
    np.testing.assert_allclose(trace.per_layer.sum(axis=1), 1.0, atol=1e-5)
    assert np.all(trace.per_layer >= 0)
    for attn in trace.attention:
        assert attn.shape == (tiny_cfg.heads, 197, 197)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-5)


def test_encode_permutation_equivariant(tiny_cfg, tiny_weights):
    seq = embed(random_image(tiny_cfg, 3), tiny_weights, tiny_cfg)
    perm = np.arange(197)
    perm[[5, 40]] = perm[[40, 5]]
    out, trace = encode(seq, tiny_weights, tiny_cfg)
    out_p, trace_p = encode(TokenSequence(seq.tokens[perm], 14, 14), tiny_weights, tiny_cfg)
    np.testing.assert_allclose(out_p.tokens, out.tokens[perm], atol=1e-5)
    np.testing.assert_allclose(trace_p.per_layer, trace.per_layer[:, perm], atol=1e-6)


def test_encode_deterministic(tiny_cfg, tiny_weights):
    seq = embed(random_image(tiny_cfg), tiny_weights, tiny_cfg)
    a, ta = encode(seq, tiny_weights, tiny_cfg)
    b, tb = encode(seq, tiny_weights, tiny_cfg)
    assert a.tokens.tobytes() == b.tokens.tobytes()
    assert ta.per_layer.tobytes() == tb.per_layer.tobytes()


def _seq_with_head(cfg, w, head_w, head_b):
    w = w.replace(head_w=head_w, head_b=head_b)
    seq = TokenSequence(np.ones((2, cfg.dim), np.float32), 1, 1)
    return classify(seq, w)


def test_classify_uniform_tie(tiny_cfg, tiny_weights):
    n = tiny_cfg.classes
    probs, pred, conf = _seq_with_head(tiny_cfg, tiny_weights, np.zeros((tiny_cfg.dim, n)), np.zeros(n))
    np.testing.assert_allclose(probs, 1 / n, atol=1e-7)
    assert pred == 0 and abs(conf - 1 / n) < 1e-7


def test_classify_direct_formula():
    cfg = ModelConfig(depth=3, dim=4, heads=1, patch=1, image_side=2, classes=3, region=1)
    w = init_weights(cfg, 0)
    probs, pred, conf = _seq_with_head(cfg, w, np.zeros((4, 3)), np.array([2.0, 1.0, 0.0]))
    assert pred == 0
    assert abs(conf - math.e ** 2 / (math.e ** 2 + math.e + 1)) < 1e-6
    assert abs(float(probs.sum()) - 1) < 1e-6


def test_classify_argmax_invariant_to_logit_scaling(tiny_cfg, tiny_weights):
    seq = embed(random_image(tiny_cfg), tiny_weights, tiny_cfg)
    _, pred, _ = classify(seq, tiny_weights)
    scaled = tiny_weights.replace(head_w=tiny_weights["head_w"] * 3, head_b=tiny_weights["head_b"] * 3)
    assert classify(seq, scaled)[1] == pred


def test_trace_type():
    t = ClassAttentionTrace(np.full((4, 5), 0.2))
    assert len(t) == 4
