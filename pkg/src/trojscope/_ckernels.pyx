# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops for the NHWC engine and the SSD template scan.

Signatures and results mirror :mod:`trojscope._kernels_py` exactly.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.string cimport memcpy

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, ho, wo, k * k * c), dtype=dtype)
    cdef floating[:, :, :, ::1] cols = out
    cdef Py_ssize_t b, i, j, di, dj, ch, si, sj, j0, base
    cdef size_t span = k * c * sizeof(floating)
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    j0 = j * stride - pad
                    for di in range(k):
                        si = i * stride + di - pad
                        if si < 0 or si >= h:
                            continue
                        base = di * k * c
                        if j0 >= 0 and j0 + k <= w:
                            # the k*c source values of one kernel row are contiguous
                            memcpy(&cols[b, i, j, base], &x[b, si, j0, 0], span)
                            continue
                        for dj in range(k):
                            sj = j0 + dj
                            if sj < 0 or sj >= w:
                                continue
                            for ch in range(c):
                                cols[b, i, j, base + dj * c + ch] = x[b, si, sj, ch]
    return out


def col2im(floating[:, :, :, ::1] cols, tuple x_shape, int k, int stride, int pad):
    cdef Py_ssize_t n = x_shape[0], h = x_shape[1], w = x_shape[2], c = x_shape[3]
    cdef Py_ssize_t ho = cols.shape[1], wo = cols.shape[2]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, h, w, c), dtype=dtype)
    cdef floating[:, :, :, ::1] x = out
    cdef Py_ssize_t b, i, j, di, dj, ch, si, sj, base
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for di in range(k):
                        si = i * stride + di - pad
                        if si < 0 or si >= h:
                            continue
                        for dj in range(k):
                            sj = j * stride + dj - pad
                            if sj < 0 or sj >= w:
                                continue
                            base = (di * k + dj) * c
                            for ch in range(c):
                                x[b, si, sj, ch] += cols[b, i, j, base + ch]
    return out


def maxpool2(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[3]
    cdef Py_ssize_t ho = x.shape[1] // 2, wo = x.shape[2] // 2
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, ho, wo, c), dtype=dtype)
    arg_arr = np.empty((n, ho, wo, c), dtype=np.int8)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, i, j, ch
    cdef floating best, v
    cdef cnp.int8_t a
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        # first maximum wins, same as numpy argmax
                        best = x[b, 2 * i, 2 * j, ch]
                        a = 0
                        v = x[b, 2 * i, 2 * j + 1, ch]
                        if v > best:
                            best = v
                            a = 1
                        v = x[b, 2 * i + 1, 2 * j, ch]
                        if v > best:
                            best = v
                            a = 2
                        v = x[b, 2 * i + 1, 2 * j + 1, ch]
                        if v > best:
                            best = v
                            a = 3
                        out[b, i, j, ch] = best
                        arg[b, i, j, ch] = a
    return out_arr, arg_arr


def maxpool2_backward(floating[:, :, :, ::1] dout, cnp.int8_t[:, :, :, ::1] arg, tuple x_shape):
    cdef Py_ssize_t n = dout.shape[0], ho = dout.shape[1], wo = dout.shape[2], c = dout.shape[3]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros(x_shape, dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, i, j, ch
    cdef int a
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        a = arg[b, i, j, ch]
                        dx[b, 2 * i + a // 2, 2 * j + a % 2, ch] = dout[b, i, j, ch]
    return dx_arr


def masked_ssd(base, patch, mask):
    cdef double[:, :, ::1] bv = np.ascontiguousarray(base, dtype=np.float64)
    cdef double[:, :, ::1] pv = np.ascontiguousarray(patch, dtype=np.float64)
    cdef cnp.uint8_t[:, ::1] mv = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t h = mv.shape[0], w = mv.shape[1], c = bv.shape[2]
    cdef Py_ssize_t ho = bv.shape[0] - h + 1, wo = bv.shape[1] - w + 1
    out_arr = np.zeros((ho, wo), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t x, y, i, j, ch
    cdef double acc, d
    with nogil:
        for x in range(ho):
            for y in range(wo):
                acc = 0.0
                for i in range(h):
                    for j in range(w):
                        if mv[i, j]:
                            for ch in range(c):
                                d = bv[x + i, y + j, ch] - pv[i, j, ch]
                                acc = acc + d * d
                out[x, y] = acc
    return out_arr
