"""Hot kernels with a compiled backend and a numpy fallback.

The compiled module ``laconv._kernels`` is used when it imports cleanly.
Set ``LACONV_KERNELS=python`` to force the numpy path. Both backends share
one signature per kernel, so callers never branch on the backend.

Dynamic kernel layout: ``w[b, i, j, (di * k + dj) * g + group]``. The conv
kernels also accept kernels stored on a grid coarser by a factor ``s``:
position (i, j) then reads ``w[b, i // s, j // s]``.
"""
from __future__ import annotations

import os

import numpy as np


def _expand_grid(w: np.ndarray, s: int) -> np.ndarray:
    return w if s == 1 else np.repeat(np.repeat(w, s, axis=1), s, axis=2)


def np_dyconv_forward(x: np.ndarray, w: np.ndarray, k: int, g: int, s: int = 1) -> np.ndarray:
    B, H, W, D = x.shape
    p = k // 2
    w = _expand_grid(w, s)
    xg = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))).reshape(B, H + 2 * p, W + 2 * p, g, D // g)
    wv = w.reshape(B, H, W, k, k, g)
    out = np.zeros((B, H, W, g, D // g), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            out += xg[:, di:di + H, dj:dj + W] * wv[:, :, :, di, dj, :, None]
    return out.reshape(B, H, W, D)


def np_dyconv_backward(x: np.ndarray, w: np.ndarray, gout: np.ndarray, k: int, g: int, s: int = 1):
    B, H, W, D = x.shape
    p = k // 2
    w = _expand_grid(w, s)
    xg = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))).reshape(B, H + 2 * p, W + 2 * p, g, D // g)
    wv = w.reshape(B, H, W, k, k, g)
    go = gout.reshape(B, H, W, g, D // g)
    dxg = np.zeros_like(xg)
    dw = np.empty((B, H, W, k, k, g), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            dxg[:, di:di + H, dj:dj + W] += go * wv[:, :, :, di, dj, :, None]
            dw[:, :, :, di, dj, :] = (go * xg[:, di:di + H, dj:dj + W]).sum(-1)
    dx = dxg[:, p:p + H, p:p + W].reshape(B, H, W, D)
    dw = dw.reshape(B, H // s, s, W // s, s, k * k * g).sum(axis=(2, 4))
    return np.ascontiguousarray(dx), dw


def np_bn_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float,
                  residual: np.ndarray | None = None, relu: bool = False):
    mean = x.mean(0, dtype=np.float64)
    var = np.square(x - mean).mean(0)
    inv = 1.0 / np.sqrt(var + eps)
    y = gamma * ((x - mean) * inv) + beta
    if residual is not None:
        y = y + residual
    if relu:
        y = np.maximum(y, 0)
    return y.astype(x.dtype), mean, var, inv


def np_bn_backward(gout: np.ndarray, x: np.ndarray, y: np.ndarray | None, gamma: np.ndarray,
                   mean: np.ndarray, inv: np.ndarray):
    n = gout.shape[0]
    gp = None
    if y is not None:
        gout = gp = np.where(y > 0, gout, 0).astype(gout.dtype)
    xhat = (x - mean) * inv
    sg = gout.sum(0, dtype=np.float64)
    sgx = (gout * xhat).sum(0, dtype=np.float64)
    dx = (gamma * inv) * (gout - sg / n - xhat * (sgx / n))
    return dx.astype(gout.dtype), sgx.astype(gout.dtype), sg.astype(gout.dtype), gp


def np_maxpool_forward(x: np.ndarray) -> np.ndarray:
    quads = (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])
    best = quads[0].copy()
    for q in quads[1:]:
        np.copyto(best, q, where=q > best)  # a NaN never wins unless it comes first
    return best


def np_maxpool_backward(gout: np.ndarray, x: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Gradient goes to the first window position equal to the output, else position 0."""
    B, H, W, C = gout.shape
    dx = np.empty((B, 2 * H, 2 * W, C), dtype=gout.dtype)
    taken = x[:, 0::2, 0::2] == out
    first = taken.copy()
    for a in (1, 2, 3):
        hit = (x[:, a // 2::2, a % 2::2] == out) & ~taken
        taken |= hit
        dx[:, a // 2::2, a % 2::2] = np.where(hit, gout, 0)
    dx[:, 0::2, 0::2] = np.where(first | ~taken, gout, 0)
    return dx


NUMPY_KERNELS = {
    "dyconv_forward": np_dyconv_forward,
    "dyconv_backward": np_dyconv_backward,
    "bn_forward": np_bn_forward,
    "bn_backward": np_bn_backward,
    "maxpool_forward": np_maxpool_forward,
    "maxpool_backward": np_maxpool_backward,
}


def _load_compiled():
    if os.environ.get("LACONV_KERNELS", "").lower() in ("python", "numpy"):
        return None
    try:
        from . import _kernels
    except ImportError:
        return None
    return {name: getattr(_kernels, name) for name in NUMPY_KERNELS}


COMPILED_KERNELS = _load_compiled()
BACKEND = "compiled" if COMPILED_KERNELS is not None else "numpy"
_active = dict(COMPILED_KERNELS or NUMPY_KERNELS)


def use_backend(name: str) -> None:
    """Switch the active backend ("compiled" or "numpy") at runtime."""
    global BACKEND
    if name == "compiled":
        if COMPILED_KERNELS is None:
            raise RuntimeError("compiled kernels are not available in this install")
        _active.update(COMPILED_KERNELS)
    elif name == "numpy":
        _active.update(NUMPY_KERNELS)
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a)


def dyconv_forward(x, w, k, g, s=1):
    return _active["dyconv_forward"](_c(x), _c(w), k, g, s)


def dyconv_backward(x, w, gout, k, g, s=1):
    return _active["dyconv_backward"](_c(x), _c(w), _c(gout), k, g, s)


def bn_forward(x, gamma, beta, eps, residual=None, relu=False):
    """Batch norm over rows of a 2-D array, optionally adding ``residual`` then applying relu.

    Returns (y, mean, var, inv_std) with float64 statistics.
    """
    res = None if residual is None else _c(residual)
    return _active["bn_forward"](_c(x), _c(gamma), _c(beta), float(eps), res, bool(relu))


def bn_backward(gout, x, y, gamma, mean, inv):
    """Returns (dx, dgamma, dbeta, g_pre). Pass the forward output as ``y`` iff relu was on."""
    f64 = lambda a: _c(np.asarray(a, dtype=np.float64))
    return _active["bn_backward"](_c(gout), _c(x), None if y is None else _c(y), _c(gamma), f64(mean), f64(inv))


def maxpool_forward(x):
    return _active["maxpool_forward"](_c(x))


def maxpool_backward(gout, x, out):
    return _active["maxpool_backward"](_c(gout), _c(x), _c(out))
