"""Swin-Tiny forward pass: patch embedding, (shifted) window attention, patch merging.

Activations inside a stage are kept as [H, W, C] token grids; each stage's
output is layer-normed and returned channel-first as [C, H, W].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import DTYPE, ShapeError, as_tensor, gelu, layer_norm, linear, softmax_rows

MASK_VALUE = -1e9
LN_EPS = 1e-5


class WeightsError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "weights error"


@dataclass(frozen=True)
class SwinConfig:
    img_size: int = 512
    patch: int = 4
    embed_dim: int = 96
    depths: tuple[int, ...] = (2, 2, 6, 2)
    heads: tuple[int, ...] = (3, 6, 12, 24)
    window: int = 7
    mlp_ratio: int = 4
    in_channels: int = 3

    def __post_init__(self):
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ValueError("depths and heads must each have four entries")
        for i, h in enumerate(self.heads):
            if self.channels(i) % h:
                raise ValueError(f"stage {i}: {self.channels(i)} channels not divisible by {h} heads")

    def channels(self, stage: int) -> int:
        return self.embed_dim * 2**stage

    def side(self, stage: int, img_side: int | None = None) -> int:
        return (img_side or self.img_size) // (self.patch * 2**stage)

    @property
    def shift(self) -> int:
        return self.window // 2


def param_shapes(cfg: SwinConfig) -> dict[str, tuple[int, ...]]:
    c0 = cfg.embed_dim
    patch_dim = cfg.in_channels * cfg.patch * cfg.patch
    table = (2 * cfg.window - 1) ** 2
    shapes: dict[str, tuple[int, ...]] = {
        "backbone.patch_embed.proj.weight": (patch_dim, c0),
        "backbone.patch_embed.proj.bias": (c0,),
        "backbone.patch_embed.norm.weight": (c0,),
        "backbone.patch_embed.norm.bias": (c0,),
    }
    for i, (depth, heads) in enumerate(zip(cfg.depths, cfg.heads)):
        c = cfg.channels(i)
        if i > 0:
            p = f"backbone.layers.{i}.downsample"
            shapes[f"{p}.norm.weight"] = (2 * c,)
            shapes[f"{p}.norm.bias"] = (2 * c,)
            shapes[f"{p}.reduction.weight"] = (2 * c, c)
        for j in range(depth):
            p = f"backbone.layers.{i}.blocks.{j}"
            hidden = cfg.mlp_ratio * c
            shapes.update({
                f"{p}.norm1.weight": (c,),
                f"{p}.norm1.bias": (c,),
                f"{p}.attn.qkv.weight": (c, 3 * c),
                f"{p}.attn.qkv.bias": (3 * c,),
                f"{p}.attn.proj.weight": (c, c),
                f"{p}.attn.proj.bias": (c,),
                f"{p}.attn.relative_position_bias_table": (table, heads),
                f"{p}.norm2.weight": (c,),
                f"{p}.norm2.bias": (c,),
                f"{p}.mlp.fc1.weight": (c, hidden),
                f"{p}.mlp.fc1.bias": (hidden,),
                f"{p}.mlp.fc2.weight": (hidden, c),
                f"{p}.mlp.fc2.bias": (c,),
            })
        shapes[f"backbone.norm{i}.weight"] = (c,)
        shapes[f"backbone.norm{i}.bias"] = (c,)
    return shapes


def check_weights(weights: dict, shapes: dict[str, tuple[int, ...]]) -> None:
    missing = [name for name in shapes if name not in weights]
    if missing:
        raise WeightsError(f"missing weight tensor(s): {', '.join(missing)}")
    for name, shape in shapes.items():
        if tuple(weights[name].shape) != tuple(shape):
            raise ShapeError(f"weight {name} has shape {tuple(weights[name].shape)}, expected {shape}")


# ---------------------------------------------------------------- patches

def patch_partition(image, patch: int = 4) -> np.ndarray:
    """[Cin,H,W] -> [(H/p)*(W/p), Cin*p*p]; each token is a patch flattened as (c, dy, dx)."""
    image = as_tensor(image)
    if image.ndim != 3:
        raise ShapeError(f"patch_partition: expected [C,H,W], got {image.shape}")
    c, h, w = image.shape
    if h % patch or w % patch:
        raise ShapeError(f"patch_partition: {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    t = image.reshape(c, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(t.reshape(gh * gw, c * patch * patch))


def patch_unpartition(tokens, channels: int, h: int, w: int, patch: int = 4) -> np.ndarray:
    gh, gw = h // patch, w // patch
    t = as_tensor(tokens).reshape(gh, gw, channels, patch, patch).transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(t.reshape(channels, h, w))


def linear_embed(tokens, w, b) -> np.ndarray:
    return linear(tokens, w, b)


def patch_merge(x, norm_w, norm_b, reduction_w) -> np.ndarray:
    """[H,W,C] -> [H/2,W/2,2C]: gather 2x2 neighbours (4C), layer-norm, project."""
    x = as_tensor(x)
    h, w, _ = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"patch_merge: spatial size {h}x{w} must be even")
    merged = np.concatenate([x[0::2, 0::2], x[1::2, 0::2], x[0::2, 1::2], x[1::2, 1::2]], axis=-1)
    return linear(layer_norm(merged, norm_w, norm_b, LN_EPS), reduction_w)


# ---------------------------------------------------------------- windows

def window_partition(x, window: int) -> np.ndarray:
    """[H,W,C] (H, W multiples of window) -> [nW, window*window, C], windows row-major."""
    x = as_tensor(x)
    h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"window_partition: {h}x{w} not a multiple of window {window}")
    t = x.reshape(h // window, window, w // window, window, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(t.reshape(-1, window * window, c))


def window_reverse(windows, window: int, h: int, w: int) -> np.ndarray:
    windows = as_tensor(windows)
    c = windows.shape[-1]
    t = windows.reshape(h // window, w // window, window, window, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(t.reshape(h, w, c))


def relative_position_index(window: int) -> np.ndarray:
    """[w*w, w*w] indices into the (2w-1)^2 bias table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def expand_relative_bias(table, window: int) -> np.ndarray:
    """Bias table [(2w-1)^2, heads] -> [heads, w*w, w*w]."""
    idx = relative_position_index(window)
    return np.ascontiguousarray(as_tensor(table)[idx].transpose(2, 0, 1))


def window_attention(
    windows, heads: int, qkv_w, qkv_b, proj_w, proj_b, rel_bias=None, mask=None, return_probs: bool = False
):
    """Multi-head self-attention inside each window.

    ``rel_bias`` is [heads, N, N]; ``mask`` is [nW, N, N] with 0 for allowed
    pairs and -1e9 for forbidden ones.
    """
    windows = as_tensor(windows)
    nw, n, c = windows.shape
    if c % heads:
        raise ShapeError(f"window_attention: {c} channels not divisible by {heads} heads")
    hd = c // heads
    qkv = linear(windows, qkv_w, qkv_b).reshape(nw, n, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]  # [nW, heads, N, hd]
    scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * DTYPE(hd**-0.5)
    if rel_bias is not None:
        scores = scores + as_tensor(rel_bias)[None]
    if mask is not None:
        scores = scores + as_tensor(mask)[:, None]
    probs = softmax_rows(scores)
    out = np.matmul(probs, v).transpose(0, 2, 1, 3).reshape(nw, n, c)
    out = linear(out, proj_w, proj_b)
    return (out, probs) if return_probs else out


def attention_mask(h: int, w: int, window: int, shift: int) -> np.ndarray | None:
    """Additive mask [nW, N, N] for a (possibly shifted) block on an h x w grid.

    The grid is zero-padded up to a multiple of the window. Keys that are
    padding, or that come from a different pre-shift region than the query,
    get -1e9. Returns None when nothing needs masking.
    """
    hp, wp = -(-h // window) * window, -(-w // window) * window
    if shift == 0 and hp == h and wp == w:
        return None
    region = np.zeros((hp, wp), dtype=np.int64)
    if shift:
        cnt = 0
        for hs in (slice(0, hp - window), slice(hp - window, hp - shift), slice(hp - shift, hp)):
            for ws in (slice(0, wp - window), slice(wp - window, wp - shift), slice(wp - shift, wp)):
                region[hs, ws] = cnt
                cnt += 1
    valid = np.zeros((hp, wp), dtype=bool)
    valid[:h, :w] = True
    valid = np.roll(valid, (-shift, -shift), axis=(0, 1))

    def parts(a):
        return a.reshape(hp // window, window, wp // window, window).transpose(0, 2, 1, 3).reshape(-1, window * window)

    rw, vw = parts(region), parts(valid)
    allowed = (rw[:, :, None] == rw[:, None, :]) & vw[:, None, :]
    return np.where(allowed, DTYPE(0.0), DTYPE(MASK_VALUE)).astype(DTYPE)


def swin_block(x, weights: dict, prefix: str, heads: int, window: int, shift: int) -> np.ndarray:
    """Pre-norm block: x + attn(LN(x)), then + MLP(LN(x)). ``shift`` 0 gives W-MSA."""
    x = as_tensor(x)
    h, w, c = x.shape
    g = lambda name: weights[f"{prefix}.{name}"]  # noqa: E731
    y = layer_norm(x, g("norm1.weight"), g("norm1.bias"), LN_EPS)
    hp, wp = -(-h // window) * window, -(-w // window) * window
    if hp != h or wp != w:
        y = np.pad(y, ((0, hp - h), (0, wp - w), (0, 0)))
    if shift:
        y = np.roll(y, (-shift, -shift), axis=(0, 1))
    rel = expand_relative_bias(g("attn.relative_position_bias_table"), window)
    attn = window_attention(
        window_partition(y, window), heads,
        g("attn.qkv.weight"), g("attn.qkv.bias"), g("attn.proj.weight"), g("attn.proj.bias"),
        rel, attention_mask(h, w, window, shift),
    )
    y = window_reverse(attn, window, hp, wp)
    if shift:
        y = np.roll(y, (shift, shift), axis=(0, 1))
    x = x + y[:h, :w]
    z = layer_norm(x, g("norm2.weight"), g("norm2.bias"), LN_EPS)
    z = linear(gelu(linear(z, g("mlp.fc1.weight"), g("mlp.fc1.bias"))), g("mlp.fc2.weight"), g("mlp.fc2.bias"))
    return x + z


def swin_forward(image, weights: dict, cfg: SwinConfig = SwinConfig()) -> list[np.ndarray]:
    """[Cin,H,W] image -> four feature maps [C*2^i, H/(4*2^i), W/(4*2^i)]."""
    check_weights(weights, param_shapes(cfg))
    image = as_tensor(image)
    if image.ndim != 3 or image.shape[0] != cfg.in_channels:
        raise ShapeError(f"swin_forward: expected [{cfg.in_channels},H,W], got {image.shape}")
    _, h, w = image.shape
    unit = cfg.patch * 2 ** (len(cfg.depths) - 1)
    if h % unit or w % unit:
        raise ShapeError(f"swin_forward: image {h}x{w} must be divisible by {unit}")
    gh, gw = h // cfg.patch, w // cfg.patch
    tokens = linear_embed(
        patch_partition(image, cfg.patch),
        weights["backbone.patch_embed.proj.weight"], weights["backbone.patch_embed.proj.bias"],
    )
    tokens = layer_norm(
        tokens, weights["backbone.patch_embed.norm.weight"], weights["backbone.patch_embed.norm.bias"], LN_EPS
    )
    x = tokens.reshape(gh, gw, cfg.embed_dim)
    outs = []
    for i, (depth, heads) in enumerate(zip(cfg.depths, cfg.heads)):
        if i > 0:
            p = f"backbone.layers.{i}.downsample"
            x = patch_merge(x, weights[f"{p}.norm.weight"], weights[f"{p}.norm.bias"], weights[f"{p}.reduction.weight"])
        for j in range(depth):
            shift = 0 if j % 2 == 0 else cfg.shift
            x = swin_block(x, weights, f"backbone.layers.{i}.blocks.{j}", heads, cfg.window, shift)
        y = layer_norm(x, weights[f"backbone.norm{i}.weight"], weights[f"backbone.norm{i}.bias"], LN_EPS)
        outs.append(np.ascontiguousarray(y.transpose(2, 0, 1)))
    return outs
