# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: im2col/col2im for convolution, 3x3 median, confusion counts."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t b = xv.shape[0], l = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t ncol = l * kh * kw
    out = np.empty((b * ho * wo, ncol), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t bi, i, j, c, m, n, row, col, yy, xx
    with nogil:
        for bi in range(b):
            for i in range(ho):
                for j in range(wo):
                    row = (bi * ho + i) * wo + j
                    col = 0
                    for c in range(l):
                        for m in range(kh):
                            yy = i * stride + m - pad
                            for n in range(kw):
                                xx = j * stride + n - pad
                                if yy < 0 or yy >= h or xx < 0 or xx >= w:
                                    ov[row, col] = 0.0
                                else:
                                    ov[row, col] = xv[bi, c, yy, xx]
                                col += 1
    return out


def col2im(cols, shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef const double[:, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64)
    cdef Py_ssize_t b = shape[0], l = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((b, l, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t bi, i, j, c, m, n, row, yy, xx
    # per output element, contributions arrive in ascending (m, n) order,
    # matching the numpy fallback exactly
    with nogil:
        for bi in range(b):
            for c in range(l):
                for m in range(kh):
                    for n in range(kw):
                        for i in range(ho):
                            yy = i * stride + m - pad
                            if yy < 0 or yy >= h:
                                continue
                            for j in range(wo):
                                xx = j * stride + n - pad
                                if xx < 0 or xx >= w:
                                    continue
                                row = (bi * ho + i) * wo + j
                                ov[bi, c, yy, xx] += cv[row, (c * kh + m) * kw + n]
    return out


def median3x3(plane):
    cdef const double[:, ::1] pv = np.ascontiguousarray(plane, dtype=np.float64)
    cdef Py_ssize_t h = pv.shape[0], w = pv.shape[1]
    out = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double buf[9]
    cdef double t
    cdef Py_ssize_t i, j, di, dj, yy, xx, k, q
    with nogil:
        for i in range(h):
            for j in range(w):
                k = 0
                for di in range(-1, 2):
                    yy = min(max(i + di, 0), h - 1)
                    for dj in range(-1, 2):
                        xx = min(max(j + dj, 0), w - 1)
                        t = pv[yy, xx]
                        q = k
                        while q > 0 and buf[q - 1] > t:
                            buf[q] = buf[q - 1]
                            q -= 1
                        buf[q] = t
                        k += 1
                ov[i, j] = buf[4]
    return out


def confusion_counts(truth, pred, Py_ssize_t num_classes):
    cdef const cnp.int64_t[::1] tv = np.ascontiguousarray(truth, dtype=np.int64).ravel()
    cdef const cnp.int64_t[::1] pv = np.ascontiguousarray(pred, dtype=np.int64).ravel()
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] ov = out
    cdef Py_ssize_t k
    with nogil:
        for k in range(tv.shape[0]):
            ov[tv[k], pv[k]] += 1
    return out
