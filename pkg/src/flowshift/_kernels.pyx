# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for stride-1 2-D convolution.

Column layout is (N*H*W, C*kh*kw) with the patch index varying fastest over
(c, i, j), which is the row-major flattening of a (C_out, C, kh, kw) kernel.
"""
import numpy as np

cimport cython

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, int pad):
    cdef Py_ssize_t n_batch = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t height = x.shape[2], width = x.shape[3]
    cdef Py_ssize_t out_h = height + 2 * pad - kh + 1
    cdef Py_ssize_t out_w = width + 2 * pad - kw + 1
    cdef Py_ssize_t patch = chans * kh * kw
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n_batch * out_h * out_w, patch), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t n, c, i, j, h, w, row, col, src_h, src_w
    with nogil:
        for n in range(n_batch):
            for h in range(out_h):
                for w in range(out_w):
                    row = (n * out_h + h) * out_w + w
                    col = 0
                    for c in range(chans):
                        for i in range(kh):
                            src_h = h + i - pad
                            if src_h < 0 or src_h >= height:
                                col += kw
                                continue
                            for j in range(kw):
                                src_w = w + j - pad
                                if 0 <= src_w < width:
                                    cols[row, col] = x[n, c, src_h, src_w]
                                col += 1
    return out


def col2im(real[:, ::1] cols, Py_ssize_t n_batch, Py_ssize_t chans,
           Py_ssize_t height, Py_ssize_t width, int kh, int kw, int pad):
    cdef Py_ssize_t out_h = height + 2 * pad - kh + 1
    cdef Py_ssize_t out_w = width + 2 * pad - kw + 1
    if cols.shape[0] != n_batch * out_h * out_w or cols.shape[1] != chans * kh * kw:
        raise ValueError("column buffer does not match the requested geometry")
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n_batch, chans, height, width), dtype=dtype)
    cdef real[:, :, :, ::1] x = out
    cdef Py_ssize_t n, c, i, j, h, w, row, col, src_h, src_w
    with nogil:
        for n in range(n_batch):
            for h in range(out_h):
                for w in range(out_w):
                    row = (n * out_h + h) * out_w + w
                    col = 0
                    for c in range(chans):
                        for i in range(kh):
                            src_h = h + i - pad
                            if src_h < 0 or src_h >= height:
                                col += kw
                                continue
                            for j in range(kw):
                                src_w = w + j - pad
                                if 0 <= src_w < width:
                                    x[n, c, src_h, src_w] += cols[row, col]
                                col += 1
    return out
