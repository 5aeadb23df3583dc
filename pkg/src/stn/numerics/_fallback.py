"""NumPy implementations of the compiled kernels.

Same signatures and in-place conventions as ``_kernels.pyx``; vectorized
across the batch axis, looping in Python over the matrix dimension.
"""
import math

import numpy as np


def cholesky_batch(a, out):
    n = a.shape[1]
    out[...] = 0.0
    for j in range(n):
        row = out[:, j, :j]
        s = a[:, j, j] - np.einsum("bk,bk->b", row, row)
        bad = np.flatnonzero(~(s > 0.0))
        if bad.size:
            return int(bad[0]), float(s[bad[0]])
        piv = np.sqrt(s)
        out[:, j, j] = piv
        if j + 1 < n:
            rest = a[:, j + 1:, j] - np.einsum("bik,bk->bi", out[:, j + 1:, :j], row)
            out[:, j + 1:, j] = rest / piv[:, None]
    return -1, 0.0


def solve_lower_batch(l, x):
    n = l.shape[1]
    for i in range(n):
        if i:
            x[:, i, :] -= np.einsum("bk,bkc->bc", l[:, i, :i], x[:, :i, :])
        x[:, i, :] /= l[:, i, i][:, None]


def solve_upper_t_batch(l, x):
    n = l.shape[1]
    for i in range(n - 1, -1, -1):
        if i + 1 < n:
            x[:, i, :] -= np.einsum("bk,bkc->bc", l[:, i + 1:, i], x[:, i + 1:, :])
        x[:, i, :] /= l[:, i, i][:, None]


def jacobi_eigh(a, v, tol, max_sweeps):
    n = a.shape[0]
    v[...] = np.eye(n)
    total = float(np.sum(a * a))
    if total == 0.0:
        return 0
    for sweep in range(max_sweeps):
        off = float(np.sum(np.triu(a, 1) ** 2)) * 2.0
        if off <= tol * tol * total:
            return sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0:
                    t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                colp = a[:, p].copy()
                colq = a[:, q].copy()
                a[:, p] = c * colp - s * colq
                a[:, q] = s * colp + c * colq
                rowp = a[p, :].copy()
                rowq = a[q, :].copy()
                a[p, :] = c * rowp - s * rowq
                a[q, :] = s * rowp + c * rowq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return -1
