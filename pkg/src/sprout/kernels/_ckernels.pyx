# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels; semantics match ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()

cdef int MAX_SWEEPS = 60
cdef double JACOBI_EPS = 1e-15


def singular_values(a):
    """One-sided cyclic Jacobi on the rows of ``a.T`` (contiguous columns)."""
    if a.shape[1] > a.shape[0]:
        a = a.T
    cdef double[:, ::1] w = np.array(a.T, dtype=np.float64, order="C")
    cdef Py_ssize_t n = w.shape[0], m = w.shape[1]
    cdef Py_ssize_t i, j, k, sweep
    cdef double alpha, beta, gamma, zeta, t, c, s, xi, xj
    cdef bint rotated
    with nogil:
        for sweep in range(MAX_SWEEPS):
            rotated = False
            for i in range(n - 1):
                for j in range(i + 1, n):
                    alpha = 0.0
                    beta = 0.0
                    gamma = 0.0
                    for k in range(m):
                        alpha += w[i, k] * w[i, k]
                        beta += w[j, k] * w[j, k]
                        gamma += w[i, k] * w[j, k]
                    if not fabs(gamma) > JACOBI_EPS * sqrt(alpha * beta):
                        continue
                    rotated = True
                    zeta = (beta - alpha) / (2.0 * gamma)
                    if zeta >= 0.0:
                        t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                    else:
                        t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                    c = 1.0 / sqrt(1.0 + t * t)
                    s = c * t
                    for k in range(m):
                        xi = w[i, k]
                        xj = w[j, k]
                        w[i, k] = c * xi - s * xj
                        w[j, k] = s * xi + c * xj
            if not rotated:
                break
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] sv = out
    for i in range(n):
        alpha = 0.0
        for k in range(m):
            alpha += w[i, k] * w[i, k]
        sv[i] = sqrt(alpha)
    return np.sort(out)[::-1]


def laplacian_variance(gray):
    cdef double[:, ::1] g = np.ascontiguousarray(gray, dtype=np.float64)
    cdef Py_ssize_t h = g.shape[0], wd = g.shape[1], y, x
    cdef double v, total = 0.0, total_sq = 0.0, mean, count
    if h < 3 or wd < 3:
        return 0.0
    # sums are exact for 8-bit input (|lap| <= 1020), so one pass is safe
    with nogil:
        for y in range(1, h - 1):
            for x in range(1, wd - 1):
                v = g[y - 1, x] + g[y + 1, x] + g[y, x - 1] + g[y, x + 1] - 4.0 * g[y, x]
                total += v
                total_sq += v * v
    count = <double>((h - 2) * (wd - 2))
    mean = total / count
    v = total_sq / count - mean * mean
    return v if v > 0.0 else 0.0


cdef inline double _dot(const double* x, const double* y, Py_ssize_t d) nogil:
    # four independent accumulators let the compiler pipeline the adds
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef Py_ssize_t k = 0
    while k + 4 <= d:
        s0 += x[k] * y[k]
        s1 += x[k + 1] * y[k + 1]
        s2 += x[k + 2] * y[k + 2]
        s3 += x[k + 3] * y[k + 3]
        k += 4
    while k < d:
        s0 += x[k] * y[k]
        k += 1
    return (s0 + s1) + (s2 + s3)


def greedy_dedup(emb, double threshold):
    cdef double[:, ::1] e = np.ascontiguousarray(emb, dtype=np.float64)
    cdef Py_ssize_t n = e.shape[0], d = e.shape[1], i, j, k, nkept = 0
    out = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] dup_of = out
    cdef cnp.int64_t[::1] kept = np.empty(n, dtype=np.int64)
    # kept rows are packed contiguously so the scan walks memory linearly
    cdef double[:, ::1] packed = np.empty((n, d), dtype=np.float64)
    with nogil:
        for i in range(n):
            for j in range(nkept):
                if _dot(&packed[j, 0], &e[i, 0], d) >= threshold:
                    dup_of[i] = kept[j]
                    break
            if dup_of[i] < 0:
                kept[nkept] = i
                for k in range(d):
                    packed[nkept, k] = e[i, k]
                nkept += 1
    return out


def confusion_matrix(pred, label, Py_ssize_t num_classes, cnp.int64_t ignore_index):
    cdef cnp.int64_t[::1] p = np.ascontiguousarray(pred, dtype=np.int64)
    cdef cnp.int64_t[::1] l = np.ascontiguousarray(label, dtype=np.int64)
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] cm = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(p.shape[0]):
            if l[i] != ignore_index:
                cm[l[i], p[i]] += 1
    return out
