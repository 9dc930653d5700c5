# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled NHWC im2col / col2im. Same contract as ``_kernels_py``."""
import numpy as np
cimport cython


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((b, ho, wo, kh * kw * c))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, oh, ow, i, j, ch, ih, iw, base
    with nogil:
        for n in range(b):
            for oh in range(ho):
                for ow in range(wo):
                    for i in range(kh):
                        ih = oh * stride + i - pad
                        if ih < 0 or ih >= h:
                            continue
                        for j in range(kw):
                            iw = ow * stride + j - pad
                            if iw < 0 or iw >= w:
                                continue
                            base = (i * kw + j) * c
                            for ch in range(c):
                                out[n, oh, ow, base + ch] = x[n, ih, iw, ch]
    return out_arr


def col2im(cols, x_shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t b = x_shape[0], h = x_shape[1], w = x_shape[2], c = x_shape[3]
    cdef const double[:, :, :, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64)
    cdef Py_ssize_t ho = cv.shape[1], wo = cv.shape[2]
    out_arr = np.zeros((b, h, w, c))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, oh, ow, i, j, ch, ih, iw, base
    with nogil:
        for n in range(b):
            for oh in range(ho):
                for ow in range(wo):
                    for i in range(kh):
                        ih = oh * stride + i - pad
                        if ih < 0 or ih >= h:
                            continue
                        for j in range(kw):
                            iw = ow * stride + j - pad
                            if iw < 0 or iw >= w:
                                continue
                            base = (i * kw + j) * c
                            for ch in range(c):
                                out[n, ih, iw, ch] += cv[n, oh, ow, base + ch]
    return out_arr
