# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: patch extraction for convolution and bilinear sampling.

Layouts are NHWC; patch columns are ordered (kernel_row, kernel_col, channel).
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport floor


def im2col(floating[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n * oh * ow, k * k * c), dtype=dtype)
    cdef floating[:, ::1] cols = out
    cdef Py_ssize_t b, i, j, ki, kj, ch, row, col, yy, xx
    with nogil:
        for b in range(n):
            for i in range(oh):
                for j in range(ow):
                    row = (b * oh + i) * ow + j
                    for ki in range(k):
                        yy = i * stride + ki - pad
                        if yy < 0 or yy >= h:
                            continue
                        for kj in range(k):
                            xx = j * stride + kj - pad
                            if xx < 0 or xx >= w:
                                continue
                            col = (ki * k + kj) * c
                            for ch in range(c):
                                cols[row, col + ch] = x[b, yy, xx, ch]
    return out


def col2im(floating[:, ::1] cols, tuple shape, int k, int stride, int pad):
    cdef Py_ssize_t n = shape[0], h = shape[1], w = shape[2], c = shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, h, w, c), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, i, j, ki, kj, ch, row, col, yy, xx
    with nogil:
        for b in range(n):
            for i in range(oh):
                for j in range(ow):
                    row = (b * oh + i) * ow + j
                    for ki in range(k):
                        yy = i * stride + ki - pad
                        if yy < 0 or yy >= h:
                            continue
                        for kj in range(k):
                            xx = j * stride + kj - pad
                            if xx < 0 or xx >= w:
                                continue
                            col = (ki * k + kj) * c
                            for ch in range(c):
                                dx[b, yy, xx, ch] += cols[row, col + ch]
    return out


def bilinear_sample(floating[:, :, ::1] img, double[:, ::1] ys, double[:, ::1] xs):
    """Sample ``img`` at fractional pixel coordinates with edge clamping."""
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], c = img.shape[2]
    cdef Py_ssize_t oh = ys.shape[0], ow = ys.shape[1]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((oh, ow, c), dtype=dtype)
    cdef floating[:, :, ::1] res = out
    cdef Py_ssize_t i, j, ch, y0, x0, y1, x1
    cdef double y, x, fy, fx
    with nogil:
        for i in range(oh):
            for j in range(ow):
                y = ys[i, j]
                x = xs[i, j]
                if y < 0:
                    y = 0
                elif y > h - 1:
                    y = h - 1
                if x < 0:
                    x = 0
                elif x > w - 1:
                    x = w - 1
                y0 = <Py_ssize_t>floor(y)
                x0 = <Py_ssize_t>floor(x)
                y1 = y0 + 1 if y0 + 1 < h else h - 1
                x1 = x0 + 1 if x0 + 1 < w else w - 1
                fy = y - y0
                fx = x - x0
                for ch in range(c):
                    res[i, j, ch] = <floating>(
                        (1 - fy) * ((1 - fx) * img[y0, x0, ch] + fx * img[y0, x1, ch])
                        + fy * ((1 - fx) * img[y1, x0, ch] + fx * img[y1, x1, ch])
                    )
    return out
