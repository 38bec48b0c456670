# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: the fast backend.

Same contracts as adnet._kernels_np. Forward passes accumulate per output
element in fixed (in-channel, kernel-row, kernel-column) order with the bias
added last, and parallelism (OpenMP, over output rows) never crosses an
output element, so results are bit-identical for any thread count and
bit-identical to the numpy backend (the extension is compiled with
-ffp-contract=off so mul/add rounding matches numpy's).

Backward kernels are single-threaded: training is toy-scale and the fixed
sequential accumulation keeps gradients reproducible.
"""

import numpy as np

cimport cython
from cython.parallel cimport prange

NAME = "cython"

ctypedef fused real:
    float
    double


def conv2d_fwd(const real[:, :, :, ::1] x, const real[:, :, :, ::1] w, const real[::1] b,
               int stride, int rate, int threads=1):
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wid = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t dil = rate + 1
    cdef Py_ssize_t oh = (h - (kh + (kh - 1) * rate)) // stride + 1
    cdef Py_ssize_t ow = (wid - (kw + (kw - 1) * rate)) // stride + 1

    if real is float:
        out_arr = np.zeros((n, cout, oh, ow), dtype=np.float32)
    else:
        out_arr = np.zeros((n, cout, oh, ow), dtype=np.float64)
    cdef real[:, :, :, ::1] out = out_arr

    cdef Py_ssize_t p, nn, i, j, co, c, fi, fj, row
    cdef real wv, bv
    cdef bint has_bias = b is not None

    with nogil:
        for p in prange(n * oh, schedule="static", num_threads=threads):
            nn = p // oh
            i = p % oh
            for co in range(cout):
                for c in range(cin):
                    for fi in range(kh):
                        row = i * stride + fi * dil
                        for fj in range(kw):
                            wv = w[co, c, fi, fj]
                            for j in range(ow):
                                out[nn, co, i, j] = out[nn, co, i, j] + wv * x[nn, c, row, j * stride + fj * dil]
                if has_bias:
                    bv = b[co]
                    for j in range(ow):
                        out[nn, co, i, j] = out[nn, co, i, j] + bv
    return out_arr


def conv2d_bwd(const real[:, :, :, ::1] x, const real[:, :, :, ::1] w, const real[:, :, :, ::1] gout,
               int stride, int rate):
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wid = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = gout.shape[2], ow = gout.shape[3]
    cdef Py_ssize_t dil = rate + 1

    if real is float:
        dt = np.float32
    else:
        dt = np.float64
    gx_arr = np.zeros((n, cin, h, wid), dtype=dt)
    gw_arr = np.zeros((cout, cin, kh, kw), dtype=dt)
    gb_arr = np.zeros(cout, dtype=dt)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef real[::1] gb = gb_arr

    cdef Py_ssize_t nn, i, j, co, c, fi, fj, row, col
    cdef real g, acc

    with nogil:
        for co in range(cout):
            acc = 0
            for nn in range(n):
                for i in range(oh):
                    for j in range(ow):
                        acc = acc + gout[nn, co, i, j]
            gb[co] = acc
        for nn in range(n):
            for co in range(cout):
                for i in range(oh):
                    for j in range(ow):
                        g = gout[nn, co, i, j]
                        for c in range(cin):
                            for fi in range(kh):
                                row = i * stride + fi * dil
                                for fj in range(kw):
                                    col = j * stride + fj * dil
                                    gw[co, c, fi, fj] += g * x[nn, c, row, col]
                                    gx[nn, c, row, col] += g * w[co, c, fi, fj]
    return gx_arr, gw_arr, gb_arr


def maxpool2d_fwd(const real[:, :, :, ::1] x, int window, int stride, int rate,
                  int threads=1, bint want_argmax=False):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wid = x.shape[3]
    cdef Py_ssize_t dil = rate + 1
    cdef Py_ssize_t oh = (h - (window + (window - 1) * rate)) // stride + 1
    cdef Py_ssize_t ow = (wid - (window + (window - 1) * rate)) // stride + 1

    if real is float:
        dt = np.float32
    else:
        dt = np.float64
    out_arr = np.empty((n, c, oh, ow), dtype=dt)
    cdef real[:, :, :, ::1] out = out_arr
    cdef long long[:, :, :, ::1] am = None
    am_arr = None
    if want_argmax:
        am_arr = np.empty((n, c, oh, ow), dtype=np.int64)
        am = am_arr

    cdef Py_ssize_t p, nn, ch, i, j, fi, fj, row, col
    cdef real best, v
    cdef long long bi

    with nogil:
        for p in prange(n * oh, schedule="static", num_threads=threads):
            nn = p // oh
            i = p % oh
            for ch in range(c):
                for j in range(ow):
                    best = x[nn, ch, i * stride, j * stride]
                    bi = (i * stride) * wid + (j * stride)
                    for fi in range(window):
                        row = i * stride + fi * dil
                        for fj in range(window):
                            if fi == 0 and fj == 0:
                                continue
                            col = j * stride + fj * dil
                            v = x[nn, ch, row, col]
                            if v > best:
                                best = v
                                bi = row * wid + col
                    out[nn, ch, i, j] = best
                    if want_argmax:
                        am[nn, ch, i, j] = bi
    return out_arr, am_arr


def maxpool2d_bwd(x_shape, const long long[:, :, :, ::1] argmax, const real[:, :, :, ::1] gout):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], wid = x_shape[3]
    cdef Py_ssize_t oh = gout.shape[2], ow = gout.shape[3]

    if real is float:
        dt = np.float32
    else:
        dt = np.float64
    gx_arr = np.zeros((n, c, h * wid), dtype=dt)
    cdef real[:, :, ::1] gx = gx_arr

    cdef Py_ssize_t nn, ch, i, j
    with nogil:
        for nn in range(n):
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        gx[nn, ch, argmax[nn, ch, i, j]] += gout[nn, ch, i, j]
    return gx_arr.reshape(x_shape)
