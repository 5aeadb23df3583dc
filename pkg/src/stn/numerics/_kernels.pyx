# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled SPD kernels.

All routines take C-contiguous float64 stacks and work on the trailing two
axes. Failure is reported through return codes so the Python layer owns the
exception types.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


def cholesky_batch(const double[:, :, ::1] a, double[:, :, ::1] out):
    """Lower Cholesky factor of every matrix in ``a`` written into ``out``.

    Returns ``(-1, 0.0)`` on success, otherwise ``(batch_index, pivot)`` of the
    first non-positive pivot.
    """
    cdef Py_ssize_t nb = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t b, i, j, k
    cdef double s, piv
    for b in range(nb):
        for i in range(n):
            for j in range(n):
                out[b, i, j] = 0.0
        for j in range(n):
            s = a[b, j, j]
            for k in range(j):
                s -= out[b, j, k] * out[b, j, k]
            if not s > 0.0:
                return b, s
            piv = sqrt(s)
            out[b, j, j] = piv
            for i in range(j + 1, n):
                s = a[b, i, j]
                for k in range(j):
                    s -= out[b, i, k] * out[b, j, k]
                out[b, i, j] = s / piv
    return -1, 0.0


def solve_lower_batch(const double[:, :, ::1] l, double[:, :, ::1] x):
    """In place forward substitution: ``x <- L^{-1} x`` per batch entry."""
    cdef Py_ssize_t nb = l.shape[0], n = l.shape[1], m = x.shape[2]
    cdef Py_ssize_t b, i, k, c
    cdef double d, lik
    for b in range(nb):
        for i in range(n):
            for k in range(i):
                lik = l[b, i, k]
                if lik != 0.0:
                    for c in range(m):
                        x[b, i, c] -= lik * x[b, k, c]
            d = l[b, i, i]
            for c in range(m):
                x[b, i, c] /= d


def solve_upper_t_batch(const double[:, :, ::1] l, double[:, :, ::1] x):
    """In place back substitution with the transpose: ``x <- L^{-T} x``."""
    cdef Py_ssize_t nb = l.shape[0], n = l.shape[1], m = x.shape[2]
    cdef Py_ssize_t b, i, k, c
    cdef double d, lki
    for b in range(nb):
        for i in range(n - 1, -1, -1):
            for k in range(i + 1, n):
                lki = l[b, k, i]
                if lki != 0.0:
                    for c in range(m):
                        x[b, i, c] -= lki * x[b, k, c]
            d = l[b, i, i]
            for c in range(m):
                x[b, i, c] /= d


def jacobi_eigh(double[:, ::1] a, double[:, ::1] v, double tol, int max_sweeps):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix, in place.

    On return the diagonal of ``a`` holds the eigenvalues and the columns of
    ``v`` the eigenvectors. Returns the number of sweeps used, or -1 if the
    off-diagonal mass did not fall below ``tol`` times the Frobenius norm.
    """
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t p, q, k, sweep
    cdef double off, total, apq, theta, t, c, s, akp, akq, app, aqq, vkp, vkq
    for p in range(n):
        for q in range(n):
            v[p, q] = 1.0 if p == q else 0.0
    total = 0.0
    for p in range(n):
        for q in range(n):
            total += a[p, q] * a[p, q]
    if total == 0.0:
        return 0
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += 2.0 * a[p, q] * a[p, q]
        if off <= tol * tol * total:
            return sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if fabs(apq) < 1e-300:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                if theta >= 0:
                    t = 1.0 / (theta + sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + sqrt(theta * theta + 1.0))
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    akp = a[p, k]
                    akq = a[q, k]
                    a[p, k] = c * akp - s * akq
                    a[q, k] = s * akp + c * akq
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return -1
