"""Dense float32 kernels used by every model stage.

Tensors are plain ``numpy.ndarray`` objects of dtype float32, C-contiguous
(row-major). Each kernel checks the shapes it documents and does not
broadcast beyond that.
"""
from __future__ import annotations

import math

import numpy as np

DTYPE = np.float32

# tanh-approximation constants for GELU
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class ShapeError(ValueError):
    """Raised when operand dimensions do not fit a kernel's contract."""


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a contiguous float32 array (no copy when already one)."""
    return np.ascontiguousarray(x, dtype=DTYPE)


def _check_rank(x: np.ndarray, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{name}: expected rank {rank}, got shape {x.shape}")


def matmul(a, b) -> np.ndarray:
    """[m,k] x [k,n] -> [m,n]."""
    a, b = as_tensor(a), as_tensor(b)
    _check_rank(a, 2, "matmul lhs")
    _check_rank(b, 2, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax_rows(x) -> np.ndarray:
    """Softmax over the last axis, stabilised by the per-row maximum.

    Accepts any rank >= 1; each row along the last axis sums to one.
    Entries equal to ``-inf`` come out exactly zero.
    """
    x = as_tensor(x)
    if x.ndim < 1:
        raise ShapeError("softmax_rows: scalar input")
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, DTYPE(0.0))
    e = np.exp(x - m)
    return (e / np.sum(e, axis=-1, keepdims=True)).astype(DTYPE, copy=False)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match last dim {c}"
        )
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    out = centered / np.sqrt(var + DTYPE(eps))
    return (out * gamma + beta).astype(DTYPE, copy=False)


def conv2d(x, w, b, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of [C_in,H,W] with [C_out,C_in,kh,kw], zero padding.

    Accumulates one matrix product per kernel tap, taps visited in row-major
    order, so the summation order is fixed.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_rank(x, 3, "conv2d input")
    _check_rank(w, 4, "conv2d weight")
    c_out, c_in, kh, kw = w.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, weight expects {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {b.shape}, expected ({c_out},)")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel sides must be odd, got {kh}x{kw}")
    _, h, wd = x.shape
    span_h = h + 2 * pad - kh
    span_w = wd + 2 * pad - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d: output size not integral for input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    oh, ow = span_h // stride + 1, span_w // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # strided operands skip BLAS
    out = np.zeros((c_out, oh * ow), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]
            out += np.matmul(taps[i, j], np.ascontiguousarray(patch).reshape(c_in, oh * ow))
    out += b[:, None]
    return out.reshape(c_out, oh, ow)


def upsample_nearest2x(x) -> np.ndarray:
    x = as_tensor(x)
    _check_rank(x, 3, "upsample_nearest2x")
    return np.ascontiguousarray(x.repeat(2, axis=1).repeat(2, axis=2))


def maxpool2(x) -> np.ndarray:
    """2x2 / stride-2 max pool; odd sides are padded with -inf on the far edge."""
    x = as_tensor(x)
    _check_rank(x, 3, "maxpool2")
    c, h, w = x.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    h2, w2 = (h + ph) // 2, (w + pw) // 2
    return np.ascontiguousarray(x.reshape(c, h2, 2, w2, 2).max(axis=(2, 4)))


def gelu(x) -> np.ndarray:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = as_tensor(x)
    inner = DTYPE(_GELU_C) * (x + DTYPE(_GELU_K) * x * x * x)
    return (DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(inner))).astype(DTYPE, copy=False)


def linear(x, w, b=None) -> np.ndarray:
    """Affine map on the last axis; ``w`` is stored [in, out]."""
    x, w = as_tensor(x), as_tensor(w)
    _check_rank(w, 2, "linear weight")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input last dim {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    out = np.matmul(x.reshape(-1, w.shape[0]), w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape}, expected ({w.shape[1]},)")
        out += b
    return out.reshape(*lead, w.shape[1])


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return (DTYPE(0.5) * (np.tanh(DTYPE(0.5) * x) + DTYPE(1.0))).astype(DTYPE, copy=False)
