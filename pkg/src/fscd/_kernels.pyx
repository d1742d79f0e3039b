# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the inner loops in :mod:`fscd._kernels_py`."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def linear_assignment(cost):
    cdef double[:, ::1] a = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    if n > m:
        raise ValueError("linear_assignment needs n_rows <= n_cols")
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef double[::1] minv = np.empty(m + 1)
    cdef Py_ssize_t[::1] p = np.zeros(m + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(m + 1, dtype=np.intp)
    cdef unsigned char[::1] used = np.zeros(m + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur, ui0
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            ui0 = u[i0]
            delta = INFINITY
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    out = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] col_of_row = out
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return out


cdef inline double _max(double x, double y) nogil:
    return x if x > y else y


cdef inline double _min(double x, double y) nogil:
    return x if x < y else y


cdef void _pairwise(double[:, ::1] a, double[:, ::1] b, double[:, ::1] out, bint generalized) nogil:
    cdef Py_ssize_t i, j
    cdef double iw, ih, inter, union, enclose, area_a, area_b, r
    for i in range(a.shape[0]):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(b.shape[0]):
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            iw = _max(0.0, _min(a[i, 2], b[j, 2]) - _max(a[i, 0], b[j, 0]))
            ih = _max(0.0, _min(a[i, 3], b[j, 3]) - _max(a[i, 1], b[j, 1]))
            inter = iw * ih
            union = area_a + area_b - inter
            r = inter / union
            if generalized:
                enclose = ((_max(a[i, 2], b[j, 2]) - _min(a[i, 0], b[j, 0]))
                           * (_max(a[i, 3], b[j, 3]) - _min(a[i, 1], b[j, 1])))
                r = r - _max(0.0, enclose - union) / enclose
            out[i, j] = r


def pairwise_iou_xyxy(a, b):
    cdef double[:, ::1] av = np.ascontiguousarray(np.reshape(a, (-1, 4)), dtype=np.float64)
    cdef double[:, ::1] bv = np.ascontiguousarray(np.reshape(b, (-1, 4)), dtype=np.float64)
    out = np.empty((av.shape[0], bv.shape[0]), dtype=np.float64)
    _pairwise(av, bv, out, False)
    return out


def pairwise_giou_xyxy(a, b):
    cdef double[:, ::1] av = np.ascontiguousarray(np.reshape(a, (-1, 4)), dtype=np.float64)
    cdef double[:, ::1] bv = np.ascontiguousarray(np.reshape(b, (-1, 4)), dtype=np.float64)
    out = np.empty((av.shape[0], bv.shape[0]), dtype=np.float64)
    _pairwise(av, bv, out, True)
    return out


def greedy_match(ious, thresholds):
    cdef double[:, ::1] iv = np.ascontiguousarray(ious, dtype=np.float64)
    cdef double[::1] th = np.ascontiguousarray(thresholds, dtype=np.float64)
    cdef Py_ssize_t n_pred = iv.shape[0], n_gt = iv.shape[1]
    out = np.zeros((th.shape[0], n_pred), dtype=np.uint8)
    cdef unsigned char[:, ::1] ov = out
    cdef unsigned char[::1] taken = np.zeros(max(n_gt, 1), dtype=np.uint8)
    cdef Py_ssize_t t, i, g, best
    cdef double best_iou
    for t in range(th.shape[0]):
        for g in range(n_gt):
            taken[g] = 0
        for i in range(n_pred):
            best = -1
            best_iou = th[t]
            for g in range(n_gt):
                if not taken[g] and iv[i, g] >= best_iou:
                    if best < 0 or iv[i, g] > best_iou:
                        best_iou = iv[i, g]
                        best = g
            if best >= 0:
                taken[best] = 1
                ov[t, i] = 1
    return out
