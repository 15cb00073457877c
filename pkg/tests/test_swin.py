import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungdet.swin_backbone import (
    SwinConfig,
    WeightsError,
    attention_mask,
    check_weights,
    expand_relative_bias,
    linear_embed,
    param_shapes,
    patch_merge,
    patch_partition,
    patch_unpartition,
    relative_position_index,
    swin_block,
    swin_forward,
    window_attention,
    window_partition,
    window_reverse,
)
from lungdet.tensor_core import ShapeError
from lungdet.weights import seeded_weights


def dense_attention(x, heads, qkv_w, qkv_b, proj_w, proj_b, bias=None):
    """Single window, float64, explicit per-head loops."""
    x = x.astype(np.float64)
    n, c = x.shape
    hd = c // heads
    qkv = x @ qkv_w + qkv_b
    out = np.zeros((n, c))
    for h in range(heads):
        q = qkv[:, h * hd : (h + 1) * hd]
        k = qkv[:, c + h * hd : c + (h + 1) * hd]
        v = qkv[:, 2 * c + h * hd : 2 * c + (h + 1) * hd]
        s = np.array([[q[i] @ k[j] / np.sqrt(hd) for j in range(n)] for i in range(n)])
        if bias is not None:
            s = s + bias[h]
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        out[:, h * hd : (h + 1) * hd] = p @ v
    return out @ proj_w + proj_b


def attn_weights(rng, c, scale=0.3):
    return (
        rng.normal(scale=scale, size=(c, 3 * c)).astype(np.float32),
        rng.normal(scale=scale, size=3 * c).astype(np.float32),
        rng.normal(scale=scale, size=(c, c)).astype(np.float32),
        rng.normal(scale=scale, size=c).astype(np.float32),
    )


SMALL = SwinConfig(img_size=64)


@pytest.fixture(scope="module")
def small_weights():
    return seeded_weights(param_shapes(SMALL), seed=11)


class TestConfig:
    def test_defaults(self):
        cfg = SwinConfig()
        assert [cfg.channels(i) for i in range(4)] == [96, 192, 384, 768]
        assert [cfg.side(i) for i in range(4)] == [128, 64, 32, 16]
        assert cfg.shift == 3

    def test_bad_heads(self):
        with pytest.raises(ValueError):
            SwinConfig(heads=(5, 6, 12, 24))

    def test_block_count(self):
        blocks = {k.split(".attn")[0] for k in param_shapes(SwinConfig()) if ".attn." in k}
        assert len(blocks) == 2 + 2 + 6 + 2


class TestPatches:
    def test_partition_shape(self):
        tokens = patch_partition(np.zeros((3, 512, 512), np.float32))
        assert tokens.shape == (16384, 48)

    def test_constant_image(self):
        tokens = patch_partition(np.full((3, 16, 16), 0.25, np.float32))
        assert np.all(tokens == tokens[0])

    def test_round_trip(self):
        x = np.random.default_rng(0).normal(size=(3, 16, 12)).astype(np.float32)
        np.testing.assert_array_equal(patch_unpartition(patch_partition(x), 3, 16, 12), x)

    def test_token_layout(self):
        x = np.arange(3 * 8 * 8, dtype=np.float32).reshape(3, 8, 8)
        t = patch_partition(x)
        # second token is the patch at row 0, column 1
        np.testing.assert_array_equal(t[1], x[:, 0:4, 4:8].ravel())

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            patch_partition(np.zeros((3, 10, 12)))

    def test_embed_zero_weights(self):
        beta = np.arange(96, dtype=np.float32)
        out = linear_embed(np.random.default_rng(1).normal(size=(5, 48)), np.zeros((48, 96)), beta)
        assert np.all(out == beta)

    def test_embed_params(self):
        shapes = param_shapes(SwinConfig())
        w, b = shapes["backbone.patch_embed.proj.weight"], shapes["backbone.patch_embed.proj.bias"]
        assert w == (48, 96) and np.prod(w) + np.prod(b) == 4704

    def test_embed_shape(self):
        out = linear_embed(np.zeros((16384, 48), np.float32), np.zeros((48, 96)), np.zeros(96))
        assert out.shape == (16384, 96)


class TestWindows:
    def test_single_window_row_major(self):
        x = np.arange(7 * 7 * 2, dtype=np.float32).reshape(7, 7, 2)
        w = window_partition(x, 7)
        assert w.shape == (1, 49, 2)
        np.testing.assert_array_equal(w[0], x.reshape(49, 2))

    def test_round_trip(self):
        x = np.random.default_rng(2).normal(size=(14, 14, 8)).astype(np.float32)
        w = window_partition(x, 7)
        assert w.shape[0] == 4
        np.testing.assert_array_equal(window_reverse(w, 7, 14, 14), x)

    def test_shift_round_trip(self):
        x = np.random.default_rng(3).normal(size=(14, 21, 4))
        np.testing.assert_array_equal(np.roll(np.roll(x, (-3, -3), (0, 1)), (3, 3), (0, 1)), x)

    def test_relative_index_range(self):
        idx = relative_position_index(7)
        assert idx.shape == (49, 49)
        assert idx.min() == 0 and idx.max() == 168
        assert np.all(np.diag(idx) == 84)


class TestAttention:
    def test_dense_oracle_4_tokens(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 4, 6)).astype(np.float32)
        w = attn_weights(rng, 6)
        bias = rng.normal(size=(2, 4, 4)).astype(np.float32)
        out = window_attention(x, 2, *w, rel_bias=bias)
        ref = dense_attention(x[0], 2, *[a.astype(np.float64) for a in w], bias=bias)
        assert np.max(np.abs(out[0] - ref)) <= 1e-5

    def test_identical_tokens_give_v(self):
        c = 6
        x = np.tile(np.random.default_rng(5).normal(size=(1, 1, c)), (1, 9, 1)).astype(np.float32)
        qkv_w = np.concatenate([np.eye(c)] * 3, axis=1)
        out = window_attention(x, 3, qkv_w, np.zeros(3 * c), np.eye(c), np.zeros(c))
        np.testing.assert_allclose(out, x, atol=1e-6)

    def test_rows_stochastic(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4, 49, 12)).astype(np.float32)
        _, probs = window_attention(x, 3, *attn_weights(rng, 12, 1.0), return_probs=True)
        assert np.max(np.abs(probs.sum(-1) - 1)) <= 1e-5

    def test_heads_must_divide(self):
        with pytest.raises(ShapeError):
            window_attention(np.zeros((1, 4, 6)), 4, *attn_weights(np.random.default_rng(0), 6))

    def test_shifted_mask_zeroes_cross_region(self):
        h = w = 14
        window, shift, c = 7, 3, 4
        mask = attention_mask(h, w, window, shift)
        # all-equal Q and K: only the mask shapes the weights
        x = np.ones((mask.shape[0], 49, c), np.float32)
        _, probs = window_attention(x, 1, np.zeros((c, 3 * c)), np.ones(3 * c), np.eye(c), np.zeros(c),
                                    mask=mask, return_probs=True)
        # recompute regions independently of the implementation
        region = np.zeros((h, w), int)
        region[h - window : h - shift, :] += 3
        region[h - shift :, :] += 6
        region[:, w - window : w - shift] += 1
        region[:, w - shift :] += 2
        rw = window_partition(region[:, :, None].astype(np.float32), window)[..., 0]
        cross = rw[:, :, None] != rw[:, None, :]
        assert cross.any()
        assert np.max(probs[:, 0][cross]) <= 1e-7
        assert np.max(np.abs(probs.sum(-1) - 1)) <= 1e-5

    def test_padded_keys_masked(self):
        mask = attention_mask(5, 5, 7, 0)
        assert mask.shape == (1, 49, 49)
        valid = np.zeros((7, 7), bool)
        valid[:5, :5] = True
        assert np.all(mask[0][:, ~valid.ravel()] < -1e8)
        assert np.all(mask[0][:, valid.ravel()] == 0)

    def test_no_mask_needed(self):
        assert attention_mask(14, 14, 7, 0) is None

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_within_window_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 49, 12)).astype(np.float32)
        w = attn_weights(rng, 12)
        perm = rng.permutation(49)
        a = window_attention(x, 3, *w)[0]
        b = window_attention(x[:, perm], 3, *w)[0]
        assert np.max(np.abs(a[perm] - b)) <= 1e-5


def _block_weights(rng, c, heads, window=7, bias_scale=0.0):
    p = "b"
    return {
        f"{p}.norm1.weight": np.ones(c, np.float32), f"{p}.norm1.bias": np.zeros(c, np.float32),
        f"{p}.attn.qkv.weight": rng.normal(scale=0.2, size=(c, 3 * c)).astype(np.float32),
        f"{p}.attn.qkv.bias": np.zeros(3 * c, np.float32),
        f"{p}.attn.proj.weight": rng.normal(scale=0.2, size=(c, c)).astype(np.float32),
        f"{p}.attn.proj.bias": np.zeros(c, np.float32),
        f"{p}.attn.relative_position_bias_table":
            rng.normal(scale=bias_scale, size=((2 * window - 1) ** 2, heads)).astype(np.float32),
        f"{p}.norm2.weight": np.ones(c, np.float32), f"{p}.norm2.bias": np.zeros(c, np.float32),
        f"{p}.mlp.fc1.weight": rng.normal(scale=0.2, size=(c, 4 * c)).astype(np.float32),
        f"{p}.mlp.fc1.bias": np.zeros(4 * c, np.float32),
        f"{p}.mlp.fc2.weight": rng.normal(scale=0.2, size=(4 * c, c)).astype(np.float32),
        f"{p}.mlp.fc2.bias": np.zeros(c, np.float32),
    }


class TestBlock:
    def test_shift_zero_is_plain_window_attention(self):
        rng = np.random.default_rng(7)
        c = 8
        wts = _block_weights(rng, c, 2, bias_scale=0.1)
        x = rng.normal(size=(14, 14, c)).astype(np.float32)
        from lungdet.tensor_core import gelu, layer_norm, linear

        y = layer_norm(x, np.ones(c), np.zeros(c))
        attn = window_attention(window_partition(y, 7), 2, wts["b.attn.qkv.weight"], wts["b.attn.qkv.bias"],
                                wts["b.attn.proj.weight"], wts["b.attn.proj.bias"],
                                expand_relative_bias(wts["b.attn.relative_position_bias_table"], 7))
        x1 = x + window_reverse(attn, 7, 14, 14)
        z = linear(gelu(linear(layer_norm(x1, np.ones(c), np.zeros(c)), wts["b.mlp.fc1.weight"])),
                   wts["b.mlp.fc2.weight"])
        np.testing.assert_allclose(swin_block(x, wts, "b", 2, 7, 0), x1 + z, atol=1e-5)

    def test_shifted_block_keeps_shape_on_unaligned_grid(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(16, 16, 8)).astype(np.float32)
        out = swin_block(x, _block_weights(rng, 8, 2), "b", 2, 7, 3)
        assert out.shape == x.shape and np.isfinite(out).all()

    def test_padded_grid_matches_unpadded_attention(self):
        # 5x5 grid in one 7x7 window: the padded keys must drop out entirely
        rng = np.random.default_rng(9)
        c = 8
        wts = _block_weights(rng, c, 2, bias_scale=0.2)
        x = rng.normal(size=(5, 5, c)).astype(np.float32)
        from lungdet.tensor_core import layer_norm

        y = layer_norm(x, np.ones(c), np.zeros(c)).reshape(1, 25, c)
        keep = (np.arange(7)[:, None] < 5) & (np.arange(7)[None, :] < 5)
        bias = expand_relative_bias(wts["b.attn.relative_position_bias_table"], 7)[:, keep.ravel()][:, :, keep.ravel()]
        attn = window_attention(y, 2, wts["b.attn.qkv.weight"], wts["b.attn.qkv.bias"],
                                wts["b.attn.proj.weight"], wts["b.attn.proj.bias"], bias)
        ref_attn = x + attn.reshape(5, 5, c)
        no_mlp = dict(wts, **{"b.mlp.fc2.weight": np.zeros((4 * c, c), np.float32)})
        np.testing.assert_allclose(swin_block(x, no_mlp, "b", 2, 7, 0), ref_attn, atol=1e-5)


class TestMerge:
    def test_shape(self):
        c = 96
        x = np.random.default_rng(10).normal(size=(128, 128, c)).astype(np.float32)
        out = patch_merge(x, np.ones(4 * c), np.zeros(4 * c), np.zeros((4 * c, 2 * c)))
        assert out.shape == (64, 64, 192)

    def test_param_count(self):
        assert np.prod(param_shapes(SwinConfig())["backbone.layers.1.downsample.reduction.weight"]) == 73728

    def test_constant_input(self):
        c = 4
        rng = np.random.default_rng(11)
        out = patch_merge(np.full((4, 4, c), 2.0), np.ones(4 * c), rng.normal(size=4 * c),
                          rng.normal(size=(4 * c, 2 * c)))
        assert np.allclose(out, out[0, 0])

    def test_neighbour_order(self):
        x = np.zeros((2, 2, 1), np.float32)
        x[0, 0], x[1, 0], x[0, 1], x[1, 1] = 1, 2, 3, 4
        # identity norm (gamma 1, beta 0) normalises [1,2,3,4]; reduction picks each slot
        out = patch_merge(x, np.ones(4), np.zeros(4), np.eye(4)[:, :2])
        z = (np.array([1, 2, 3, 4]) - 2.5) / np.sqrt(1.25 + 1e-5)
        np.testing.assert_allclose(out[0, 0], z[:2], atol=1e-5)

    def test_odd(self):
        with pytest.raises(ShapeError):
            patch_merge(np.zeros((3, 4, 2)), np.ones(8), np.zeros(8), np.zeros((8, 4)))


class TestForward:
    def test_small_shapes_and_finite(self, small_weights):
        img = np.random.default_rng(12).random((3, 64, 64)).astype(np.float32)
        outs = swin_forward(img, small_weights, SMALL)
        assert [o.shape for o in outs] == [(96, 16, 16), (192, 8, 8), (384, 4, 4), (768, 2, 2)]
        assert all(np.isfinite(o).all() for o in outs)

    @pytest.mark.parametrize("side", [32, 96])
    def test_shape_invariant(self, small_weights, side):
        outs = swin_forward(np.zeros((3, side, side), np.float32), small_weights, SMALL)
        assert [o.shape for o in outs] == [(96 * 2**i, side // (4 * 2**i), side // (4 * 2**i)) for i in range(4)]

    def test_deterministic(self, small_weights):
        img = np.random.default_rng(13).random((3, 64, 64)).astype(np.float32)
        a = swin_forward(img, small_weights, SMALL)
        b = swin_forward(img, small_weights, SMALL)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))

    def test_missing_weight_named(self, small_weights):
        w = dict(small_weights)
        del w["backbone.layers.2.blocks.3.attn.qkv.weight"]
        with pytest.raises(WeightsError, match=r"layers\.2\.blocks\.3\.attn\.qkv\.weight"):
            swin_forward(np.zeros((3, 64, 64), np.float32), w, SMALL)

    def test_wrong_shape(self, small_weights):
        w = dict(small_weights)
        w["backbone.norm0.weight"] = np.ones(5, np.float32)
        with pytest.raises(ShapeError):
            check_weights(w, param_shapes(SMALL))

    def test_bad_input_side(self, small_weights):
        with pytest.raises(ShapeError):
            swin_forward(np.zeros((3, 48, 48), np.float32), small_weights, SMALL)

    @pytest.mark.slow
    def test_512_shapes(self):
        cfg = SwinConfig()
        outs = swin_forward(np.random.default_rng(14).random((3, 512, 512)).astype(np.float32),
                            seeded_weights(param_shapes(cfg), 1), cfg)
        assert [o.shape for o in outs] == [(96, 128, 128), (192, 64, 64), (384, 32, 32), (768, 16, 16)]
        assert all(np.isfinite(o).all() for o in outs)
