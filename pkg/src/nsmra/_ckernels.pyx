# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Signatures mirror :mod:`nsmra._pykernels` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, fabs

cnp.import_array()


def chordal_matrix(double[:, ::1] X, double[:, ::1] Y):
    cdef Py_ssize_t n = X.shape[0], m = Y.shape[0], i, j
    cdef double dx, dy, dz
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] D = out
    with nogil:
        for i in range(n):
            for j in range(m):
                dx = X[i, 0] - Y[j, 0]
                dy = X[i, 1] - Y[j, 1]
                dz = X[i, 2] - Y[j, 2]
                D[i, j] = sqrt(dx * dx + dy * dy + dz * dz)
    return out


def nsexp_matrix(double[:, ::1] X, double[:, ::1] Y,
                 double[::1] sx, double[::1] bx,
                 double[::1] sy, double[::1] by):
    cdef Py_ssize_t n = X.shape[0], m = Y.shape[0], i, j
    cdef double dx, dy, dz, d, b2, pre, q
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] C = out
    with nogil:
        for i in range(n):
            for j in range(m):
                dx = X[i, 0] - Y[j, 0]
                dy = X[i, 1] - Y[j, 1]
                dz = X[i, 2] - Y[j, 2]
                d = sqrt(dx * dx + dy * dy + dz * dz)
                b2 = bx[i] * bx[i] + by[j] * by[j]
                q = 2.0 * bx[i] * by[j] / b2
                pre = q * sqrt(q)
                C[i, j] = sx[i] * sy[j] * pre * exp(-d / sqrt(0.5 * b2))
    return out


def wendland_matrix(double[:, ::1] X, double[:, ::1] centers, double ell):
    cdef Py_ssize_t n = X.shape[0], m = centers.shape[0], i, j
    cdef double dx, dy, dz, u, v, v2
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] W = out
    with nogil:
        for i in range(n):
            for j in range(m):
                dx = X[i, 0] - centers[j, 0]
                dy = X[i, 1] - centers[j, 1]
                dz = X[i, 2] - centers[j, 2]
                u = sqrt(dx * dx + dy * dy + dz * dz) / ell
                if u < 1.0:
                    v = 1.0 - u
                    v2 = v * v
                    W[i, j] = v2 * v2 * v2 * (35.0 * u * u + 18.0 * u + 3.0) / 3.0
    return out


def lasso_cd(double[::1, :] X, double[::1] y, double lam, double[::1] w,
             double tol, Py_ssize_t max_iter):
    """Cyclic coordinate descent on 0.5/n ||y - Xw||^2 + lam ||w||_1.

    ``X`` is Fortran-ordered with centred columns; ``w`` is updated in place.
    Returns the number of sweeps performed.
    """
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1], i, j, it
    cdef double nn = <double>n
    cdef double rho, old, new, delta, maxdelta, thr
    norms = np.empty(p, dtype=np.float64)
    resid = np.empty(n, dtype=np.float64)
    cdef double[::1] sq = norms
    cdef double[::1] r = resid
    with nogil:
        for j in range(p):
            sq[j] = 0.0
            for i in range(n):
                sq[j] += X[i, j] * X[i, j]
            sq[j] /= nn
        for i in range(n):
            r[i] = y[i]
        for j in range(p):
            if w[j] != 0.0:
                for i in range(n):
                    r[i] -= X[i, j] * w[j]
        for it in range(max_iter):
            maxdelta = 0.0
            for j in range(p):
                if sq[j] == 0.0:
                    continue
                old = w[j]
                rho = 0.0
                for i in range(n):
                    rho += X[i, j] * r[i]
                rho = rho / nn + sq[j] * old
                if rho > lam:
                    new = (rho - lam) / sq[j]
                elif rho < -lam:
                    new = (rho + lam) / sq[j]
                else:
                    new = 0.0
                delta = new - old
                if delta != 0.0:
                    for i in range(n):
                        r[i] -= X[i, j] * delta
                    w[j] = new
                    if fabs(delta) > maxdelta:
                        maxdelta = fabs(delta)
            if maxdelta < tol:
                break
    return it + 1
