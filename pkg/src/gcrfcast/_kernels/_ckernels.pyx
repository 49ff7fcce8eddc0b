# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, log

cnp.import_array()


def common_history(X, bint expansion=False):
    cdef const double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1]
    out = np.ones((n, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, s
    cdef double acc, v
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for s in range(h):
                if expansion:
                    acc += x[i, s] - x[j, s]
                else:
                    acc += fabs(x[i, s] - x[j, s])
            if expansion:
                acc = fabs(acc)
            v = exp(-acc / h)
            o[i, j] = v
            o[j, i] = v
    return out


def jsd_matrix(P):
    cdef const double[:, ::1] p = np.ascontiguousarray(P, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], nb = p.shape[1]
    out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, b
    cdef double acc, a, c, m
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for b in range(nb):
                a = p[i, b]
                c = p[j, b]
                m = 0.5 * (a + c)
                if a > 0:
                    acc += a * log(a / m)
                if c > 0:
                    acc += c * log(c / m)
            acc *= 0.5
            if acc < 0:
                acc = 0.0
            o[i, j] = acc
            o[j, i] = acc
    return out


def pair_bin_stats(S, y, edges):
    cdef const double[:, ::1] s = np.ascontiguousarray(S, dtype=np.float64)
    cdef const double[::1] yy = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] e = np.ascontiguousarray(edges, dtype=np.float64)
    cdef Py_ssize_t n = yy.shape[0], nb = e.shape[0] - 1
    counts = np.zeros(nb, dtype=np.int64)
    sums = np.zeros(nb, dtype=np.float64)
    cdef cnp.int64_t[::1] cnt = counts
    cdef double[::1] sm = sums
    cdef Py_ssize_t i, j, lo, hi, mid
    cdef double v, d
    for i in range(n):
        for j in range(i + 1, n):
            v = s[i, j]
            # last edge <= v, clipped into [0, nb-1]
            lo = 0
            hi = nb + 1
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if e[mid] <= v:
                    lo = mid
                else:
                    hi = mid
            if v < e[0]:
                lo = 0
            if lo > nb - 1:
                lo = nb - 1
            d = yy[i] - yy[j]
            cnt[lo] += 1
            sm[lo] += 0.5 * d * d
    return counts, sums


cdef inline Py_ssize_t _find(const int[::1] indices, Py_ssize_t lo, Py_ssize_t hi, int r) nogil:
    cdef Py_ssize_t mid
    hi -= 1
    while lo <= hi:
        mid = (lo + hi) // 2
        if indices[mid] == r:
            return mid
        elif indices[mid] < r:
            lo = mid + 1
        else:
            hi = mid - 1
    return -1


def selected_inverse(indptr_, indices_, data_, d_):
    cdef const int[::1] indptr = np.ascontiguousarray(indptr_, dtype=np.int32)
    cdef const int[::1] indices = np.ascontiguousarray(indices_, dtype=np.int32)
    cdef const double[::1] data = np.ascontiguousarray(data_, dtype=np.float64)
    cdef const double[::1] d = np.ascontiguousarray(d_, dtype=np.float64)
    cdef Py_ssize_t n = d.shape[0]
    zdata_arr = np.zeros(data.shape[0], dtype=np.float64)
    zdiag_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] zdata = zdata_arr
    cdef double[::1] zdiag = zdiag_arr
    cdef Py_ssize_t i, a, b, lo, hi, pos
    cdef int j, k, r, c
    cdef double acc, z
    cdef bint broken = False
    with nogil:
        for i in range(n - 1, -1, -1):
            lo = indptr[i]
            hi = indptr[i + 1]
            for a in range(lo, hi):
                j = indices[a]
                acc = 0.0
                for b in range(lo, hi):
                    k = indices[b]
                    if k == j:
                        z = zdiag[j]
                    else:
                        if k > j:
                            r = k
                            c = j
                        else:
                            r = j
                            c = k
                        pos = _find(indices, indptr[c], indptr[c + 1], r)
                        if pos < 0:
                            broken = True
                            z = 0.0
                        else:
                            z = zdata[pos]
                    acc += data[b] * z
                zdata[a] = -acc
            acc = 0.0
            for a in range(lo, hi):
                acc += data[a] * zdata[a]
            zdiag[i] = 1.0 / d[i] - acc
    if broken:
        raise ValueError("selected inverse: pattern is not closed under fill")
    return zdata_arr, zdiag_arr
