# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution and pooling kernels (same signatures as _pykernels)."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c * kh * kw, ho * wo), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, iy, ix
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(wo):
                            ix = ox * stride + j - pad
                            if ix < 0 or ix >= w:
                                continue
                            out[b, row, oy * wo + ox] = x[b, ch, iy, ix]
    return out_arr


def col2im(const real[:, :, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
           Py_ssize_t w, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
           Py_ssize_t pad):
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, iy, ix
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(wo):
                            ix = ox * stride + j - pad
                            if ix < 0 or ix >= w:
                                continue
                            out[b, ch, iy, ix] += cols[b, row, oy * wo + ox]
    return out_arr


def pool_argmax(const real[:, :, :, ::1] x, Py_ssize_t window, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - window) // stride + 1
    cdef Py_ssize_t wo = (w - window) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    idx_arr = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, oy, ox, i, j, iy, ix, best_i
    cdef real best, v
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    iy = oy * stride
                    ix = ox * stride
                    best = x[b, ch, iy, ix]
                    best_i = iy * w + ix
                    for i in range(window):
                        for j in range(window):
                            v = x[b, ch, iy + i, ix + j]
                            if v > best:
                                best = v
                                best_i = (iy + i) * w + ix + j
                    out[b, ch, oy, ox] = best
                    idx[b, ch, oy, ox] = best_i
    return out_arr, idx_arr


def pool_scatter(const real[:, :, :, ::1] g, const cnp.int64_t[:, :, :, ::1] idx,
                 Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, h * w), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, oy, ox
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    out[b, ch, idx[b, ch, oy, ox]] += g[b, ch, oy, ox]
    return out_arr.reshape(n, c, h, w)
