# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for conv patch lowering and max-pooling.

Mirrors ``_numpy.py`` exactly: same shapes, same tie-breaking, same
per-cell accumulation order in col2im.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n * oh * ow, c * kh * kw), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t i, ci, ki, kj, oi, oj, ih, iw, row
    for i in range(n):
        for oi in range(oh):
            for oj in range(ow):
                row = (i * oh + oi) * ow + oj
                for ci in range(c):
                    for ki in range(kh):
                        ih = oi * stride - pad + ki
                        if ih < 0 or ih >= h:
                            continue
                        for kj in range(kw):
                            iw = oj * stride - pad + kj
                            if iw < 0 or iw >= w:
                                continue
                            cols[row, (ci * kh + ki) * kw + kj] = x[i, ci, ih, iw]
    return out


def col2im(const double[:, ::1] cols, Py_ssize_t n, Py_ssize_t c,
           Py_ssize_t h, Py_ssize_t w, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t i, ci, ki, kj, oi, oj, ih, iw
    # (ki, kj) outermost so each input cell accumulates in the same order
    # as the numpy fallback's kernel-offset loop.
    for i in range(n):
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    for oi in range(oh):
                        ih = oi * stride - pad + ki
                        if ih < 0 or ih >= h:
                            continue
                        for oj in range(ow):
                            iw = oj * stride - pad + kj
                            if iw < 0 or iw >= w:
                                continue
                            dx[i, ci, ih, iw] += cols[(i * oh + oi) * ow + oj,
                                                      (ci * kh + ki) * kw + kj]
    return out


def maxpool_forward(const double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
                    Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (w - kw) // stride + 1
    out_arr = np.empty((n, c, oh, ow), dtype=np.float64)
    arg_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef long long[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t i, ci, oi, oj, ki, kj, ih, iw
    cdef double v, best
    cdef long long best_idx
    for i in range(n):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    best = x[i, ci, oi * stride, oj * stride]
                    best_idx = (oi * stride) * w + oj * stride
                    for ki in range(kh):
                        ih = oi * stride + ki
                        for kj in range(kw):
                            iw = oj * stride + kj
                            v = x[i, ci, ih, iw]
                            if v > best:  # strict: first occurrence wins ties
                                best = v
                                best_idx = ih * w + iw
                    out[i, ci, oi, oj] = best
                    arg[i, ci, oi, oj] = best_idx
    return out_arr, arg_arr


def maxpool_backward(const double[:, :, :, ::1] dout,
                     const long long[:, :, :, ::1] argmax,
                     Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1]
    cdef Py_ssize_t oh = dout.shape[2], ow = dout.shape[3]
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t i, ci, oi, oj
    cdef long long idx
    for i in range(n):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    idx = argmax[i, ci, oi, oj]
                    dx[i, ci, idx // w, idx % w] += dout[i, ci, oi, oj]
    return out
