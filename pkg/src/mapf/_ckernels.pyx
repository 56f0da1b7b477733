# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled numerical kernels; see ``_kernels_py`` for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, INFINITY, isfinite

cnp.import_array()


cdef double _lse(const double[::1] a) nogil:
    cdef Py_ssize_t i, n = a.shape[0]
    cdef double amax = -INFINITY, s = 0.0
    if n == 0:
        return -INFINITY
    for i in range(n):
        if a[i] > amax:
            amax = a[i]
    if not isfinite(amax):
        return amax
    for i in range(n):
        s += exp(a[i] - amax)
    return amax + log(s)


def logsumexp(a):
    cdef double[::1] av = np.ascontiguousarray(a, dtype=np.float64).ravel()
    return _lse(av)


def normalize_log(a):
    cdef double[::1] av = np.ascontiguousarray(a, dtype=np.float64).ravel()
    cdef Py_ssize_t i, n = av.shape[0]
    cdef double lse = _lse(av)
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    if lse == -INFINITY:
        out.fill(np.nan)
        return out.reshape(np.shape(a)), lse
    with nogil:
        for i in range(n):
            ov[i] = exp(av[i] - lse)
    return out.reshape(np.shape(a)), lse


def weight_update(log_xi, log_lambda):
    cdef double[::1] xv = np.ascontiguousarray(log_xi, dtype=np.float64).ravel()
    cdef double[::1] lv = np.ascontiguousarray(log_lambda, dtype=np.float64).ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    if lv.shape[0] != n:
        raise ValueError("log_xi and log_lambda differ in length")
    new = np.empty(n, dtype=np.float64)
    cdef double[::1] nv = new
    cdef double lse_new, lse_old
    with nogil:
        for i in range(n):
            nv[i] = xv[i] + lv[i]
        lse_new = _lse(nv)
        lse_old = _lse(xv)
    return new, lse_new, lse_old


def inverse_cdf(w, u):
    cdef double[::1] wv = np.ascontiguousarray(w, dtype=np.float64).ravel()
    cdef double[::1] uv = np.ascontiguousarray(u, dtype=np.float64).ravel()
    cdef Py_ssize_t n = wv.shape[0], m = uv.shape[0], i, j = 0
    cdef Py_ssize_t last = n - 1
    cdef double c
    idx = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] iv = idx
    if n == 0:
        raise ValueError("empty weight vector")
    with nogil:
        while last > 0 and wv[last] <= 0.0:
            last -= 1
        c = wv[0]
        for i in range(m):
            while j < last and uv[i] >= c:
                j += 1
                c += wv[j]
            iv[i] = j
    return idx


def nearest_segment(points, waypoints):
    cdef double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
    cdef double[:, ::1] wp = np.ascontiguousarray(waypoints, dtype=np.float64)
    cdef Py_ssize_t m = p.shape[0], ns = wp.shape[0] - 1, i, k, best
    cdef double ax, ay, dx, dy, len2, s, px, py, ex, ey, d2, bestd2, bx, by
    seg = np.empty(m, dtype=np.int64)
    proj = np.empty((m, 2), dtype=np.float64)
    dist = np.empty(m, dtype=np.float64)
    cdef cnp.int64_t[::1] sv = seg
    cdef double[:, ::1] pv = proj
    cdef double[::1] dv = dist
    with nogil:
        for i in range(m):
            best = 0
            bestd2 = INFINITY
            bx = 0.0
            by = 0.0
            for k in range(ns):
                ax = wp[k, 0]
                ay = wp[k, 1]
                dx = wp[k + 1, 0] - ax
                dy = wp[k + 1, 1] - ay
                len2 = dx * dx + dy * dy
                s = ((p[i, 0] - ax) * dx + (p[i, 1] - ay) * dy) / len2
                if s < 0.0:
                    s = 0.0
                elif s > 1.0:
                    s = 1.0
                px = ax + s * dx
                py = ay + s * dy
                ex = p[i, 0] - px
                ey = p[i, 1] - py
                d2 = ex * ex + ey * ey
                if d2 < bestd2:
                    bestd2 = d2
                    best = k
                    bx = px
                    by = py
            sv[i] = best
            pv[i, 0] = bx
            pv[i, 1] = by
            dv[i] = sqrt(bestd2)
    return seg, proj, dist
