"""Language-guided dynamic convolution.

All feature maps are batch-first and channels-last: ``(B, h, w, d)``. Text
features are ``(B, l, d_text)`` with a boolean token mask ``(B, l)``.

Pipeline of one layer::

    pack(X, s) -> affinity(A) -> condition(C, packed) -> broadcast back to h x w
      -> kernels = C W_1 + b_1 -> dynamic depth-wise conv(X, kernels)

Broadcasting commutes with the per-position linear map, so kernels are
generated once per packed cell and the conv reads each one for its s x s
block. That yields the same kernels as broadcasting C first, s^2 times cheaper.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Module, param, zeros
from .tensor import ShapeError, Tensor
from .text import TextFeatures

FULL = "full"
LANGUAGE_ONLY = "language_only"


def _check_pack(h: int, w: int, s: int) -> None:
    if s < 1 or h % s or w % s:
        raise ShapeError(f"packing size {s} must divide the feature map {h}x{w}")


def pixel_pack(x: Tensor, s: int) -> Tensor:
    """(B, h, w, d) -> (B, h*w/s^2, s*s*d); each token is one s x s block, row-major."""
    B, h, w, d = x.shape
    _check_pack(h, w, s)
    t = T.reshape(x, (B, h // s, s, w // s, s, d))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (B, (h // s) * (w // s), s * s * d))


def pixel_unpack(tokens: Tensor, s: int, h: int, w: int) -> Tensor:
    """Exact inverse of :func:`pixel_pack`."""
    B, n, sd = tokens.shape
    _check_pack(h, w, s)
    d = sd // (s * s)
    if n != (h // s) * (w // s) or d * s * s != sd:
        raise ShapeError(f"cannot unpack {tokens.shape} to {h}x{w} with s={s}")
    t = T.reshape(tokens, (B, h // s, w // s, s, s, d))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (B, h, w, d))


def pixel_unpack_condition(c_packed: Tensor, s: int, h: int, w: int) -> Tensor:
    """Broadcast each packed condition row to its s x s cell: (B, n, d) -> (B, h, w, d)."""
    B, n, d = c_packed.shape
    _check_pack(h, w, s)
    if n != (h // s) * (w // s):
        raise ShapeError(f"{n} packed rows do not tile {h}x{w} with s={s}")
    return T.repeat_blocks(T.reshape(c_packed, (B, h // s, w // s, d)), s)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    B, n, d = t.shape
    return T.transpose(T.reshape(t, (B, n, heads, d // heads)), (0, 2, 1, 3))


def affinity(x_packed: Tensor, y: TextFeatures, w_x: Tensor, w_y: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product affinity between image tokens and words.

    Returns ``(B, heads, n, l)``; each row is a softmax over the real tokens.
    """
    d = w_x.shape[1]
    if d % heads:
        raise ShapeError(f"dim {d} not divisible by {heads} heads")
    if not y.mask.any(axis=1).all():
        raise ValueError("affinity needs at least one unpadded token per example")
    q = _split_heads(T.linear(x_packed, w_x), heads)
    k = _split_heads(T.linear(y.features, w_y), heads)
    logits = T.mul(q @ T.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(d // heads))
    return T.softmax(logits, mask=y.mask[:, None, None, :])


def condition_matrix(a: Tensor, y: TextFeatures, w_a: Tensor, w_c: Tensor) -> Tensor:
    """relu(A (Y W_A) W_C) with heads concatenated before W_C: -> (B, n, d)."""
    B, H, n, l = a.shape
    v = _split_heads(T.linear(y.features, w_a), H)
    mixed = T.reshape(T.transpose(a @ v, (0, 2, 1, 3)), (B, n, w_a.shape[1]))
    return T.relu(T.linear(mixed, w_c))


def language_only_condition(y: TextFeatures, w_a: Tensor, w_c: Tensor) -> Tensor:
    """Ablation: one condition row from pooled text, shared by every position: (B, 1, d)."""
    B = y.pooled.shape[0]
    c = T.relu(T.linear(T.linear(y.pooled, w_a), w_c))
    return T.reshape(c, (B, 1, w_c.shape[1]))


def generate_kernels(c: Tensor, w_1: Tensor, b_1: Tensor) -> Tensor:
    """Per-position kernels C W_1 + b_1; last axis laid out as (di, dj, group)."""
    return T.linear(c, w_1, b_1)


def dynamic_depthwise_conv(x: Tensor, kernels: Tensor, k: int, g: int, s: int = 1) -> Tensor:
    return T.dynamic_depthwise_conv(x, kernels, k, g, s)


class LaConvMaps(NamedTuple):
    """Intermediate maps. ``condition`` and ``kernels`` sit on the packed grid
    ``(B, h/stride, w/stride, .)``; :meth:`full` broadcasts them to ``h x w``."""

    affinity: Tensor | None
    condition: Tensor
    kernels: Tensor
    stride: int

    def full(self) -> tuple[np.ndarray, np.ndarray]:
        s = self.stride
        rep = (lambda a: a) if s == 1 else (lambda a: np.repeat(np.repeat(a, s, axis=1), s, axis=2))
        return rep(self.condition.data), rep(self.kernels.data)


class LaConv(Module):
    """Parameters of one language-guided dynamic convolution."""

    def __init__(self, dim: int, text_dim: int, k: int = 3, g: int = 1, s: int = 1, heads: int = 2,
                 mode: str = FULL, rng: np.random.Generator | None = None, dtype=np.float32):
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        if dim % g:
            raise ValueError(f"channels {dim} not divisible by groups {g}")
        if dim % heads:
            raise ValueError(f"channels {dim} not divisible by heads {heads}")
        if mode not in (FULL, LANGUAGE_ONLY):
            raise ValueError(f"unknown generation mode {mode!r}")
        rng = rng or np.random.default_rng(0)
        self.dim, self.k, self.g, self.s, self.heads, self.mode = dim, k, g, s, heads, mode
        self.w_x = param(rng, (s * s * dim, dim), dtype=dtype)
        self.w_y = param(rng, (text_dim, dim), dtype=dtype)
        self.w_a = param(rng, (text_dim, dim), dtype=dtype)
        self.w_c = param(rng, (dim, dim), dtype=dtype)
        self.w_1 = param(rng, (dim, k * k * g), dtype=dtype)
        self.b_1 = zeros(k * k * g, dtype)

    def maps(self, x: Tensor, y: TextFeatures) -> LaConvMaps:
        B, h, w, d = x.shape
        if d != self.dim:
            raise ShapeError(f"expected {self.dim} channels, got {d}")
        if self.mode == LANGUAGE_ONLY:
            c = T.reshape(language_only_condition(y, self.w_a, self.w_c), (B, 1, 1, d))
            ker = generate_kernels(c, self.w_1, self.b_1)
            if h != w:
                ker = T.add(ker, np.zeros((B, h, w, ker.shape[-1]), dtype=x.dtype))
                return LaConvMaps(None, c, ker, 1)
            return LaConvMaps(None, c, ker, h)
        a = affinity(pixel_pack(x, self.s), y, self.w_x, self.w_y, self.heads)
        c = T.reshape(condition_matrix(a, y, self.w_a, self.w_c), (B, h // self.s, w // self.s, d))
        return LaConvMaps(a, c, generate_kernels(c, self.w_1, self.b_1), self.s)

    def __call__(self, x: Tensor, y: TextFeatures) -> Tensor:
        m = self.maps(x, y)
        return dynamic_depthwise_conv(x, m.kernels, self.k, self.g, m.stride)


def laconv_layer(x: Tensor, y: TextFeatures, params: LaConv) -> Tensor:
    return params(x, y)


class MLP(Module):
    """BN(relu(BN(x W_a)) W_b) with a 4x hidden expansion; ``residual`` is added after the last BN."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32, expansion: int = 4):
        self.w_a = param(rng, (dim, expansion * dim), dtype=dtype)
        self.bn_a = BatchNorm(expansion * dim, dtype)
        self.w_b = param(rng, (expansion * dim, dim), dtype=dtype)
        self.bn_b = BatchNorm(dim, dtype)

    def __call__(self, x: Tensor, residual: Tensor | None = None) -> Tensor:
        return self.bn_b(T.linear(self.bn_a(T.linear(x, self.w_a), relu=True), self.w_b), residual=residual)


class LaConvBlock(Module):
    """x' = relu(BN(LaConv(x, y)) + x);  out = MLP(x') + x'."""

    def __init__(self, dim: int, text_dim: int, k: int = 3, g: int = 1, s: int = 1, heads: int = 2,
                 mode: str = FULL, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.conv = LaConv(dim, text_dim, k, g, s, heads, mode, rng, dtype)
        self.bn = BatchNorm(dim, dtype)
        self.mlp = MLP(dim, rng, dtype)

    def __call__(self, x: Tensor, y: TextFeatures) -> Tensor:
        h = self.bn(self.conv(x, y), residual=x, relu=True)
        return self.mlp(h, residual=h)


def laconv_block(x_prev: Tensor, y: TextFeatures, params: LaConvBlock) -> Tensor:
    return params(x_prev, y)
