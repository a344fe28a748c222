"""Compiled convolution / pooling kernels (hot loops of the bench).

Stride-1 convolutions (the common case here) are written as shifted
row-axpy / row-dot loops over raw pointers so the C compiler can
vectorize them; other strides take a generic scalar path.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

NAME = "cython"


def conv2d_forward(const double[:, :, ::1] x, const double[:, :, :, ::1] w, b,
                   int stride, int pad):
    cdef int c = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef int f = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int ho = (h + 2 * pad - kh) // stride + 1
    cdef int wo = (wd + 2 * pad - kw) // stride + 1
    y_arr = np.zeros((f, ho, wo))
    cdef double[:, :, ::1] y = y_arr
    cdef const double[::1] bv
    cdef bint has_b = b is not None
    if has_b:
        bv = b
    cdef const double* xp = &x[0, 0, 0]
    cdef const double* wp = &w[0, 0, 0, 0]
    cdef double* yp = &y[0, 0, 0]
    cdef const double* xrow
    cdef double* yrow
    cdef int o, i, j, ci, ki, kj, ih, iw, j0, j1, i0, i1
    cdef double acc, wv
    with nogil:
        if has_b:
            for o in range(f):
                for i in range(ho * wo):
                    yp[o * ho * wo + i] = bv[o]
        if stride == 1:
            for o in range(f):
                for ci in range(c):
                    for ki in range(kh):
                        i0 = max(0, pad - ki)
                        i1 = min(ho, h + pad - ki)
                        for kj in range(kw):
                            wv = wp[((o * c + ci) * kh + ki) * kw + kj]
                            j0 = max(0, pad - kj)
                            j1 = min(wo, wd + pad - kj)
                            for i in range(i0, i1):
                                yrow = yp + (o * ho + i) * wo
                                xrow = xp + (ci * h + i + ki - pad) * wd + kj - pad
                                for j in range(j0, j1):
                                    yrow[j] += wv * xrow[j]
        else:
            for o in range(f):
                for i in range(ho):
                    for j in range(wo):
                        acc = 0.0
                        for ci in range(c):
                            for ki in range(kh):
                                ih = i * stride + ki - pad
                                if ih < 0 or ih >= h:
                                    continue
                                for kj in range(kw):
                                    iw = j * stride + kj - pad
                                    if iw < 0 or iw >= wd:
                                        continue
                                    acc += x[ci, ih, iw] * w[o, ci, ki, kj]
                        y[o, i, j] += acc
    return y_arr


def conv2d_backward(const double[:, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, ::1] gy, int stride, int pad):
    cdef int c = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef int f = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int ho = gy.shape[1], wo = gy.shape[2]
    gx_arr = np.zeros((c, h, wd))
    gw_arr = np.zeros((f, c, kh, kw))
    gb_arr = np.zeros(f)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef const double* xp = &x[0, 0, 0]
    cdef const double* wp = &w[0, 0, 0, 0]
    cdef const double* gyp = &gy[0, 0, 0]
    cdef double* gxp = &gx[0, 0, 0]
    cdef const double* gyrow
    cdef const double* xrow
    cdef double* gxrow
    cdef int o, i, j, ci, ki, kj, ih, iw, i0, i1, j0, j1
    cdef double g, wv, acc
    with nogil:
        for o in range(f):
            acc = 0.0
            for i in range(ho * wo):
                acc += gyp[o * ho * wo + i]
            gb[o] += acc
        if stride == 1:
            for o in range(f):
                for ci in range(c):
                    for ki in range(kh):
                        i0 = max(0, pad - ki)
                        i1 = min(ho, h + pad - ki)
                        for kj in range(kw):
                            wv = wp[((o * c + ci) * kh + ki) * kw + kj]
                            j0 = max(0, pad - kj)
                            j1 = min(wo, wd + pad - kj)
                            acc = 0.0
                            for i in range(i0, i1):
                                gyrow = gyp + (o * ho + i) * wo
                                xrow = xp + (ci * h + i + ki - pad) * wd + kj - pad
                                gxrow = gxp + (ci * h + i + ki - pad) * wd + kj - pad
                                for j in range(j0, j1):
                                    acc += xrow[j] * gyrow[j]
                                for j in range(j0, j1):
                                    gxrow[j] += wv * gyrow[j]
                            gw[o, ci, ki, kj] += acc
        else:
            for o in range(f):
                for i in range(ho):
                    for j in range(wo):
                        g = gy[o, i, j]
                        for ci in range(c):
                            for ki in range(kh):
                                ih = i * stride + ki - pad
                                if ih < 0 or ih >= h:
                                    continue
                                for kj in range(kw):
                                    iw = j * stride + kj - pad
                                    if iw < 0 or iw >= wd:
                                        continue
                                    gw[o, ci, ki, kj] += x[ci, ih, iw] * g
                                    gx[ci, ih, iw] += w[o, ci, ki, kj] * g
    return gx_arr, gw_arr, gb_arr


def conv2d_backward_x(const double[:, :, :, ::1] w, const double[:, :, ::1] gy,
                      x_shape, int stride, int pad):
    cdef int c = x_shape[0], h = x_shape[1], wd = x_shape[2]
    cdef int f = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int ho = gy.shape[1], wo = gy.shape[2]
    gx_arr = np.zeros((c, h, wd))
    cdef double[:, :, ::1] gx = gx_arr
    cdef const double* wp = &w[0, 0, 0, 0]
    cdef const double* gyp = &gy[0, 0, 0]
    cdef double* gxp = &gx[0, 0, 0]
    cdef const double* gyrow
    cdef double* gxrow
    cdef int o, i, j, ci, ki, kj, ih, iw, i0, i1, j0, j1
    cdef double g, wv
    with nogil:
        if stride == 1:
            for o in range(f):
                for ci in range(c):
                    for ki in range(kh):
                        i0 = max(0, pad - ki)
                        i1 = min(ho, h + pad - ki)
                        for kj in range(kw):
                            wv = wp[((o * c + ci) * kh + ki) * kw + kj]
                            j0 = max(0, pad - kj)
                            j1 = min(wo, wd + pad - kj)
                            for i in range(i0, i1):
                                gyrow = gyp + (o * ho + i) * wo
                                gxrow = gxp + (ci * h + i + ki - pad) * wd + kj - pad
                                for j in range(j0, j1):
                                    gxrow[j] += wv * gyrow[j]
        else:
            for o in range(f):
                for i in range(ho):
                    for j in range(wo):
                        g = gy[o, i, j]
                        for ci in range(c):
                            for ki in range(kh):
                                ih = i * stride + ki - pad
                                if ih < 0 or ih >= h:
                                    continue
                                for kj in range(kw):
                                    iw = j * stride + kj - pad
                                    if iw < 0 or iw >= wd:
                                        continue
                                    gx[ci, ih, iw] += w[o, ci, ki, kj] * g
    return gx_arr


def maxpool2_forward(const double[:, :, ::1] x):
    cdef int c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef int h2 = h // 2, w2 = w // 2
    y_arr = np.zeros((c, h2, w2))
    idx_arr = np.zeros((c, h2, w2), dtype=np.int64)
    cdef double[:, :, ::1] y = y_arr
    cdef cnp.int64_t[:, :, ::1] idx = idx_arr
    cdef int ci, i, j, k, dy, dx
    cdef double best, v
    cdef int besti
    with nogil:
        for ci in range(c):
            for i in range(h2):
                for j in range(w2):
                    best = x[ci, 2 * i, 2 * j]
                    besti = 0
                    for k in range(1, 4):
                        dy = k >> 1
                        dx = k & 1
                        v = x[ci, 2 * i + dy, 2 * j + dx]
                        if v > best:
                            best = v
                            besti = k
                    y[ci, i, j] = best
                    idx[ci, i, j] = besti
    return y_arr, idx_arr


def maxpool2_backward(const double[:, :, ::1] gy, const cnp.int64_t[:, :, ::1] idx,
                      in_shape):
    cdef int c = in_shape[0], h = in_shape[1], w = in_shape[2]
    cdef int h2 = h // 2, w2 = w // 2
    gx_arr = np.zeros((c, h, w))
    cdef double[:, :, ::1] gx = gx_arr
    cdef int ci, i, j, k
    with nogil:
        for ci in range(c):
            for i in range(h2):
                for j in range(w2):
                    k = <int> idx[ci, i, j]
                    gx[ci, 2 * i + (k >> 1), 2 * j + (k & 1)] = gy[ci, i, j]
    return gx_arr
