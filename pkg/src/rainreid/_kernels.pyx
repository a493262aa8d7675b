# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Semantics match ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor

cnp.import_array()


def area_downsample(image, int rate):
    cdef cnp.float64_t[:, :, ::1] src = np.ascontiguousarray(image, dtype=np.float64)
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1], c = src.shape[2]
    cdef Py_ssize_t oh = (h + rate - 1) // rate, ow = (w + rate - 1) // rate
    out_arr = np.zeros((oh, ow, c), dtype=np.float64)
    cdef cnp.float64_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, k, di, dj, si, sj
    cdef double inv = 1.0 / (rate * rate)
    cdef double acc
    for i in range(oh):
        for j in range(ow):
            for k in range(c):
                acc = 0.0
                for di in range(rate):
                    si = i * rate + di
                    if si >= h:
                        si = h - 1
                    for dj in range(rate):
                        sj = j * rate + dj
                        if sj >= w:
                            sj = w - 1
                        acc += src[si, sj, k]
                out[i, j, k] = acc * inv
    return out_arr


cdef void _axis(Py_ssize_t n_in, Py_ssize_t n_out, Py_ssize_t[::1] i0,
                Py_ssize_t[::1] i1, double[::1] frac):
    cdef double scale = <double>n_in / <double>n_out
    cdef double s
    cdef Py_ssize_t o, a
    for o in range(n_out):
        s = (o + 0.5) * scale - 0.5
        if s < 0.0:
            s = 0.0
        a = <Py_ssize_t>floor(s)
        if a > n_in - 1:
            a = n_in - 1
        i0[o] = a
        i1[o] = a + 1 if a + 1 < n_in else n_in - 1
        frac[o] = s - a


def bilinear_resize(image, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef cnp.float64_t[:, :, ::1] src = np.ascontiguousarray(image, dtype=np.float64)
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1], c = src.shape[2]
    y0_arr = np.empty(out_h, dtype=np.intp)
    y1_arr = np.empty(out_h, dtype=np.intp)
    fy_arr = np.empty(out_h, dtype=np.float64)
    x0_arr = np.empty(out_w, dtype=np.intp)
    x1_arr = np.empty(out_w, dtype=np.intp)
    fx_arr = np.empty(out_w, dtype=np.float64)
    cdef Py_ssize_t[::1] y0 = y0_arr, y1 = y1_arr, x0 = x0_arr, x1 = x1_arr
    cdef double[::1] fy = fy_arr, fx = fx_arr
    _axis(h, out_h, y0, y1, fy)
    _axis(w, out_w, x0, x1, fx)
    out_arr = np.empty((out_h, out_w, c), dtype=np.float64)
    cdef cnp.float64_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double top, bottom, wx, wy
    for i in range(out_h):
        wy = fy[i]
        for j in range(out_w):
            wx = fx[j]
            for k in range(c):
                top = src[y0[i], x0[j], k] * (1.0 - wx) + src[y0[i], x1[j], k] * wx
                bottom = src[y1[i], x0[j], k] * (1.0 - wx) + src[y1[i], x1[j], k] * wx
                out[i, j, k] = top * (1.0 - wy) + bottom * wy
    return out_arr


def pairwise_euclidean(a, b):
    cdef cnp.float64_t[:, ::1] q = np.ascontiguousarray(a, dtype=np.float64)
    cdef cnp.float64_t[:, ::1] g = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n_q = q.shape[0], n_g = g.shape[0], d = q.shape[1]
    out_arr = np.empty((n_q, n_g), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double acc, t
    for i in range(n_q):
        for j in range(n_g):
            acc = 0.0
            for k in range(d):
                t = q[i, k] - g[j, k]
                acc += t * t
            out[i, j] = sqrt(acc)
    return out_arr


def match_positions(dist, query_ids, gallery_ids):
    cdef cnp.float64_t[:, ::1] D = np.ascontiguousarray(dist, dtype=np.float64)
    cdef cnp.int64_t[::1] qid = np.ascontiguousarray(query_ids, dtype=np.int64)
    cdef cnp.int64_t[::1] gid = np.ascontiguousarray(gallery_ids, dtype=np.int64)
    cdef Py_ssize_t n_q = D.shape[0], n_g = D.shape[1]
    cdef Py_ssize_t i, j, m, total = 0
    cdef double dj
    cdef cnp.int64_t rank
    for i in range(n_q):
        for j in range(n_g):
            if gid[j] == qid[i]:
                total += 1
    offsets_arr = np.zeros(n_q + 1, dtype=np.int64)
    positions_arr = np.empty(total, dtype=np.int64)
    cdef cnp.int64_t[::1] offsets = offsets_arr
    cdef cnp.int64_t[::1] positions = positions_arr
    cdef Py_ssize_t cursor = 0, start
    for i in range(n_q):
        start = cursor
        for j in range(n_g):
            if gid[j] != qid[i]:
                continue
            dj = D[i, j]
            rank = 0
            for m in range(n_g):
                if D[i, m] < dj or (D[i, m] == dj and m < j):
                    rank += 1
            positions[cursor] = rank
            cursor += 1
        # matches were visited in gallery order; sort this query's slice
        if cursor - start > 1:
            positions_arr[start:cursor].sort()
        offsets[i + 1] = cursor
    return offsets_arr, positions_arr
