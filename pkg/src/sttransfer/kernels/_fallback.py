"""Pure-numpy versions of the hot kernels.

Every function here has a twin with the same signature in ``_native.pyx``.
Outputs agree to floating-point summation order.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

# tan(22.5 deg); the direction bins of non-maximum suppression
TAN_22_5 = 0.41421356237309503


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Lower a padded (N, C, Hp, Wp) block to (N*Ho*Wo, C*kh*kw) patch rows."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def col2im(cols: np.ndarray, padded_shape: tuple, kh: int, kw: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back into a padded block."""
    n, c, hp, wp = padded_shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    patches = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += patches[:, :, i, j]
    return out


def maxpool_forward(x: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int):
    """Max-pool with -inf padding; windows may overhang the far edge (ceil mode).

    Returns the pooled block and, per output cell, the flat ``row * W + col``
    index of the winning input pixel.
    """
    n, c, h, w = x.shape
    hp = max(h + 2 * pad, (ho - 1) * stride + k)
    wp = max(w + 2 * pad, (wo - 1) * stride + k)
    xp = np.full((n, c, hp, wp), -np.inf, dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + local // k - pad
    cols = np.arange(wo)[None, :] * stride + local % k - pad
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.int64)


def maxpool_backward(dout: np.ndarray, argmax: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c = dout.shape[:2]
    plane = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1, 1)
    target = (argmax + plane).ravel()
    dx = np.bincount(target, weights=dout.ravel(), minlength=n * c * h * w)
    return dx.astype(dout.dtype, copy=False).reshape(n, c, h, w)


def canny_nms(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray, tol: float) -> np.ndarray:
    """Thin a gradient-magnitude image along the quantized gradient direction.

    A pixel survives when it is >= its neighbour behind and > its neighbour
    ahead (both up to ``tol``); the asymmetry breaks plateau ties so edges
    come out one pixel wide. The outermost ring of pixels is always zero.
    """
    h, w = mag.shape
    out = np.zeros_like(mag)
    if h < 3 or w < 3:
        return out
    ax, ay = np.abs(gx), np.abs(gy)
    horiz = ay <= TAN_22_5 * ax
    vert = ~horiz & (ax <= TAN_22_5 * ay)
    diag = ~horiz & ~vert
    d45 = diag & (gx * gy > 0)
    d135 = diag & ~d45

    m = mag[1:-1, 1:-1]
    # (behind, ahead) neighbour for each direction bin
    pairs = [
        (horiz, mag[1:-1, :-2], mag[1:-1, 2:]),
        (vert, mag[:-2, 1:-1], mag[2:, 1:-1]),
        (d45, mag[:-2, :-2], mag[2:, 2:]),
        (d135, mag[:-2, 2:], mag[2:, :-2]),
    ]
    keep = np.zeros(m.shape, dtype=bool)
    for sel, behind, ahead in pairs:
        keep |= sel[1:-1, 1:-1] & (m >= behind - tol) & (m > ahead + tol)
    out[1:-1, 1:-1] = np.where(keep, m, 0.0)
    return out


def hysteresis(strong: np.ndarray, weak: np.ndarray) -> np.ndarray:
    """Keep weak pixels 8-connected (transitively) to a strong pixel."""
    cand = (strong | weak).astype(bool)
    labels, nlab = ndimage.label(cand, structure=np.ones((3, 3), dtype=bool))
    if nlab == 0:
        return np.zeros(strong.shape, dtype=np.uint8)
    hit = np.zeros(nlab + 1, dtype=bool)
    hit[labels[strong.astype(bool)]] = True
    hit[0] = False
    return hit[labels].astype(np.uint8)
