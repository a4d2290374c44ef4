# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_fallback.py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, fabs

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double TAN_22_5 = 0.41421356237309503


def _dtype_of(real[:, :, :, ::1] arr):
    if real is float:
        return np.float32
    return np.float64


def im2col(real[:, :, :, ::1] xp, int kh, int kw, int stride):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    cdef Py_ssize_t K = c * kh * kw
    out_arr = np.empty((n * ho * wo, K), dtype=_dtype_of(xp))
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, ch, p, q, row, col, r0, c0
    with nogil:
        for b in range(n):
            for i in range(ho):
                r0 = i * stride
                for j in range(wo):
                    c0 = j * stride
                    row = (b * ho + i) * wo + j
                    col = 0
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                out[row, col] = xp[b, ch, r0 + p, c0 + q]
                                col = col + 1
    return out_arr


def col2im(real[:, ::1] cols, tuple padded_shape, int kh, int kw, int stride):
    cdef Py_ssize_t n = padded_shape[0], c = padded_shape[1]
    cdef Py_ssize_t hp = padded_shape[2], wp = padded_shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    dt = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, hp, wp), dtype=dt)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, ch, p, q, row, col, r0, c0
    with nogil:
        for b in range(n):
            for i in range(ho):
                r0 = i * stride
                for j in range(wo):
                    c0 = j * stride
                    row = (b * ho + i) * wo + j
                    col = 0
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                out[b, ch, r0 + p, c0 + q] += cols[row, col]
                                col = col + 1
    return out_arr


def maxpool_forward(real[:, :, :, ::1] x, int k, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    out_arr = np.empty((n, c, ho, wo), dtype=_dtype_of(x))
    idx_arr = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, i, j, p, q, r, s, best_i
    cdef real best, v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        best = -INFINITY
                        best_i = -1
                        # row-major scan, first maximum wins (same as numpy argmax)
                        for p in range(k):
                            r = i * stride + p - pad
                            if r < 0 or r >= h:
                                continue
                            for q in range(k):
                                s = j * stride + q - pad
                                if s < 0 or s >= w:
                                    continue
                                v = x[b, ch, r, s]
                                if best_i == -1 or v > best:
                                    best = v
                                    best_i = r * w + s
                        out[b, ch, i, j] = best
                        idx[b, ch, i, j] = best_i
    return out_arr, idx_arr


def maxpool_backward(real[:, :, :, ::1] dout, cnp.int64_t[:, :, :, ::1] argmax, int h, int w):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], ho = dout.shape[2], wo = dout.shape[3]
    dt = np.float32 if real is float else np.float64
    dx_arr = np.zeros((n, c, h * w), dtype=dt)
    cdef real[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, ch, i, j
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        dx[b, ch, argmax[b, ch, i, j]] += dout[b, ch, i, j]
    return dx_arr.reshape(n, c, h, w)


def canny_nms(double[:, ::1] mag, double[:, ::1] gx, double[:, ::1] gy, double tol):
    cdef Py_ssize_t h = mag.shape[0], w = mag.shape[1]
    out_arr = np.zeros((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, s
    cdef double ax, ay, m, behind, ahead
    if h < 3 or w < 3:
        return out_arr
    with nogil:
        for r in range(1, h - 1):
            for s in range(1, w - 1):
                ax = fabs(gx[r, s])
                ay = fabs(gy[r, s])
                m = mag[r, s]
                if ay <= TAN_22_5 * ax:
                    behind = mag[r, s - 1]
                    ahead = mag[r, s + 1]
                elif ax <= TAN_22_5 * ay:
                    behind = mag[r - 1, s]
                    ahead = mag[r + 1, s]
                elif gx[r, s] * gy[r, s] > 0:
                    behind = mag[r - 1, s - 1]
                    ahead = mag[r + 1, s + 1]
                else:
                    behind = mag[r - 1, s + 1]
                    ahead = mag[r + 1, s - 1]
                if m >= behind - tol and m > ahead + tol:
                    out[r, s] = m
    return out_arr


def hysteresis(strong_in, weak_in):
    strong_arr = np.ascontiguousarray(strong_in, dtype=np.uint8)
    weak_arr = np.ascontiguousarray(weak_in, dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] strong = strong_arr
    cdef cnp.uint8_t[:, ::1] weak = weak_arr
    cdef Py_ssize_t h = strong.shape[0], w = strong.shape[1]
    out_arr = np.zeros((h, w), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    stack_arr = np.empty(h * w + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] stack = stack_arr
    cdef Py_ssize_t top = 0, r, s, rr, ss, dr, ds, cur
    with nogil:
        for r in range(h):
            for s in range(w):
                if strong[r, s] and not out[r, s]:
                    out[r, s] = 1
                    stack[top] = r * w + s
                    top = top + 1
                    while top > 0:
                        top = top - 1
                        cur = stack[top]
                        rr = cur // w
                        ss = cur % w
                        for dr in range(-1, 2):
                            for ds in range(-1, 2):
                                if rr + dr < 0 or rr + dr >= h or ss + ds < 0 or ss + ds >= w:
                                    continue
                                if out[rr + dr, ss + ds]:
                                    continue
                                if weak[rr + dr, ss + ds] or strong[rr + dr, ss + ds]:
                                    out[rr + dr, ss + ds] = 1
                                    stack[top] = (rr + dr) * w + ss + ds
                                    top = top + 1
    return out_arr
