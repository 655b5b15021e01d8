# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im. Same contract and summation order as _kernels_py."""
import numpy as np
cimport cython
from cython cimport floating


def _im2col(floating[:, :, :, :, ::1] xp, floating[:, :, ::1] out,
            int kt, int kh, int kw, int st, int sh, int sw,
            int ot, int oh, int ow):
    cdef Py_ssize_t n, c, a, b, d, t, i, j, row, col
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    for n in range(N):
        for c in range(C):
            for a in range(kt):
                for b in range(kh):
                    for d in range(kw):
                        row = ((c * kt + a) * kh + b) * kw + d
                        col = 0
                        for t in range(ot):
                            for i in range(oh):
                                for j in range(ow):
                                    out[n, row, col] = xp[n, c, a + st * t, b + sh * i, d + sw * j]
                                    col += 1


def _col2im(floating[:, :, ::1] cols, floating[:, :, :, :, ::1] out,
            int kt, int kh, int kw, int st, int sh, int sw,
            int ot, int oh, int ow):
    cdef Py_ssize_t n, c, a, b, d, t, i, j, row, col
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1]
    # kernel offsets outermost: each output cell receives its terms in the
    # same order as the numpy fallback
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                for n in range(N):
                    for c in range(C):
                        row = ((c * kt + a) * kh + b) * kw + d
                        col = 0
                        for t in range(ot):
                            for i in range(oh):
                                for j in range(ow):
                                    out[n, c, a + st * t, b + sh * i, d + sw * j] += cols[n, row, col]
                                    col += 1


def im2col(xp, kernel, stride, out_extent):
    xp = np.ascontiguousarray(xp)
    n, c = xp.shape[:2]
    kt, kh, kw = kernel
    ot, oh, ow = out_extent
    out = np.empty((n, c * kt * kh * kw, ot * oh * ow), dtype=xp.dtype)
    _im2col(xp, out, kt, kh, kw, stride[0], stride[1], stride[2], ot, oh, ow)
    return out


def col2im(cols, padded_shape, kernel, stride, out_extent):
    cols = np.ascontiguousarray(cols)
    n, c = padded_shape[:2]
    kt, kh, kw = kernel
    ot, oh, ow = out_extent
    cols = cols.reshape(n, c * kt * kh * kw, ot * oh * ow)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    _col2im(cols, out, kt, kh, kw, stride[0], stride[1], stride[2], ot, oh, ow)
    return out
