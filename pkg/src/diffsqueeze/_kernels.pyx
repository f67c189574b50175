# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot loops; see _kernels_py for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, hypot, copysign

cnp.import_array()


def searchsorted_rows(cdf, rows, u):
    cdef const double[:, ::1] c = np.ascontiguousarray(cdf, dtype=np.float64)
    cdef const long long[::1] r = np.ascontiguousarray(rows, dtype=np.int64)
    cdef const double[::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t n = uu.shape[0], m = c.shape[1]
    out = np.empty(n, dtype=np.int64)
    cdef long long[::1] o = out
    cdef Py_ssize_t i, lo, hi, mid, row
    cdef double x
    with nogil:
        for i in range(n):
            row = r[i]
            x = uu[i]
            lo = 0
            hi = m
            # first index with c[row, idx] > x
            while lo < hi:
                mid = (lo + hi) >> 1
                if c[row, mid] > x:
                    hi = mid
                else:
                    lo = mid + 1
            o[i] = lo if lo < m else m - 1
    return out


def scatter_matrices(x, y):
    cdef const double[:, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] Y = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t E = X.shape[0], n = X.shape[1]
    out = np.zeros((E, 6, 6))
    cdef double[:, :, ::1] S = out
    cdef double k[6]
    cdef Py_ssize_t e, j, a, b
    with nogil:
        for e in range(E):
            for j in range(n):
                k[0] = X[e, j] * X[e, j]
                k[1] = X[e, j] * Y[e, j]
                k[2] = Y[e, j] * Y[e, j]
                k[3] = X[e, j]
                k[4] = Y[e, j]
                k[5] = 1.0
                for a in range(6):
                    for b in range(a, 6):
                        S[e, a, b] += k[a] * k[b]
            for a in range(6):
                for b in range(a):
                    S[e, a, b] = S[e, b, a]
    return out


def g_means(x, y, double ca, double cb):
    cdef const double[:, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] Y = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t E = X.shape[0], n = X.shape[1]
    out = np.empty((E, 4))
    cdef double[:, ::1] G = out
    cdef double k = ca * cb, p, q, s0, s1, s2
    cdef Py_ssize_t e, j
    with nogil:
        for e in range(E):
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            for j in range(n):
                p = X[e, j] * Y[e, j]
                q = cb * cb * X[e, j] * X[e, j] + ca * ca * Y[e, j] * Y[e, j] - k * k
                s0 += q * p
                s1 += q + 2.0 * p * p
                s2 += p
            G[e, 0] = s0 / n
            G[e, 1] = -k * s1 / n
            G[e, 2] = 3.0 * k * k * s2 / n
            G[e, 3] = -k * k * k
    return out


cdef void _project(double e0, double e1, double y0, double y1, int max_iter,
                   double* x0, double* x1) noexcept nogil:
    cdef double z0, z1, g, r0, n0, s0, s1, s, ratio0, ratio1, numer0, denom0, xde0
    cdef int i
    if y1 > 0.0:
        if y0 > 0.0:
            z0 = y0 / e0
            z1 = y1 / e1
            g = z0 * z0 + z1 * z1 - 1.0
            if g != 0.0:
                r0 = (e0 / e1) * (e0 / e1)
                n0 = r0 * z0
                s0 = z1 - 1.0
                s1 = 0.0 if g < 0.0 else hypot(n0, z1) - 1.0
                s = 0.0
                for i in range(max_iter):
                    s = 0.5 * (s0 + s1)
                    if s == s0 or s == s1:
                        break
                    ratio0 = n0 / (s + r0)
                    ratio1 = z1 / (s + 1.0)
                    g = ratio0 * ratio0 + ratio1 * ratio1 - 1.0
                    if g > 0.0:
                        s0 = s
                    elif g < 0.0:
                        s1 = s
                    else:
                        break
                x0[0] = r0 * y0 / (s + r0)
                x1[0] = y1 / (s + 1.0)
            else:
                x0[0] = y0
                x1[0] = y1
        else:
            x0[0] = 0.0
            x1[0] = e1
    else:
        numer0 = e0 * y0
        denom0 = e0 * e0 - e1 * e1
        if numer0 < denom0:
            xde0 = numer0 / denom0
            x0[0] = e0 * xde0
            x1[0] = e1 * sqrt(max(1.0 - xde0 * xde0, 0.0))
        else:
            x0[0] = e0
            x1[0] = 0.0


def project_to_ellipse(u, v, double e0, double e1, int max_iter=200):
    cdef const double[::1] U = np.ascontiguousarray(u, dtype=np.float64).ravel()
    cdef const double[::1] V = np.ascontiguousarray(v, dtype=np.float64).ravel()
    cdef Py_ssize_t n = U.shape[0], i
    ox = np.empty(n)
    oy = np.empty(n)
    cdef double[::1] X = ox
    cdef double[::1] Y = oy
    cdef double a, b
    with nogil:
        for i in range(n):
            _project(e0, e1, fabs(U[i]), fabs(V[i]), max_iter, &a, &b)
            X[i] = copysign(a, U[i])
            Y[i] = copysign(b, V[i])
    shape = np.shape(u)
    return ox.reshape(shape), oy.reshape(shape)
