"""Dense SPD linear algebra on float64 arrays.

Every function accepts a single ``(n, n)`` matrix or a stack ``(..., n, n)``
and dispatches to the active kernel backend. No explicit inverses are formed.
"""
import numpy as np

from ..errors import DimensionMismatch, NonFiniteInput, NotPositiveDefinite
from . import _backend

SYMMETRY_TOL = 1e-8


def _as_stack(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise DimensionMismatch(f"expected square matrix, got shape {m.shape}")
    return np.ascontiguousarray(m.reshape((-1,) + m.shape[-2:])), m.shape


def _check_symmetric(stack):
    if not np.all(np.isfinite(stack)):
        raise NonFiniteInput("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(stack), initial=0.0)))
    asym = float(np.max(np.abs(stack - stack.transpose(0, 2, 1)), initial=0.0))
    if asym > SYMMETRY_TOL * scale:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")


def _factor(stack):
    out = np.empty_like(stack)
    index, pivot = _backend.impl.cholesky_batch(stack, out)
    if index >= 0:
        raise NotPositiveDefinite(
            f"non-positive pivot {pivot:.3g} in matrix {index}; increase covariance regularization",
            pivot=pivot,
            index=index,
        )
    return out


def cholesky(m):
    """Lower-triangular ``L`` with ``L @ L.T == m``.

    Raises
    ------
    NotPositiveDefinite
        If any pivot is not strictly positive.
    """
    stack, shape = _as_stack(m)
    _check_symmetric(stack)
    return _factor(stack).reshape(shape)


def log_det_spd(m):
    """``ln det m`` from the Cholesky diagonal."""
    L = cholesky(m)
    return 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)


def _rhs_stack(b, lead, n):
    b = np.asarray(b, dtype=np.float64)
    nb = int(np.prod(lead, dtype=np.int64))
    # only a 1-d b is a vector; stacked vectors must be passed as (..., n, 1)
    vector = b.ndim == 1
    if vector:
        b = b[..., None]
    if b.shape[-2] != n:
        raise DimensionMismatch(f"right-hand side has {b.shape[-2]} rows, matrix has {n}")
    if b.ndim == 2:
        b = np.broadcast_to(b, (nb,) + b.shape)
    elif b.shape[:-2] != tuple(lead):
        raise DimensionMismatch(f"batch shape {b.shape[:-2]} does not match {tuple(lead)}")
    return np.array(b.reshape((nb,) + b.shape[-2:]), dtype=np.float64, order="C"), vector


def solve_lower(L, b):
    """``L^{-1} b`` for lower-triangular ``L`` (no validation)."""
    Ls, shape = _as_stack(L)
    x, vector = _rhs_stack(b, shape[:-2], Ls.shape[1])
    _backend.impl.solve_lower_batch(Ls, x)
    return _unstack(x, shape, vector)


def solve_upper_t(L, b):
    """``L^{-T} b`` for lower-triangular ``L`` (no validation)."""
    Ls, shape = _as_stack(L)
    x, vector = _rhs_stack(b, shape[:-2], Ls.shape[1])
    _backend.impl.solve_upper_t_batch(Ls, x)
    return _unstack(x, shape, vector)


def cho_solve(L, b):
    """Solve ``(L L^T) x = b`` given the Cholesky factor."""
    Ls, shape = _as_stack(L)
    x, vector = _rhs_stack(b, shape[:-2], Ls.shape[1])
    _backend.impl.solve_lower_batch(Ls, x)
    _backend.impl.solve_upper_t_batch(Ls, x)
    return _unstack(x, shape, vector)


def _unstack(x, shape, vector):
    lead = shape[:-2]
    if vector:
        return x[..., 0].reshape(lead + (x.shape[1],))
    return x.reshape(lead + x.shape[1:])


def spd_solve(m, b):
    """Solve ``m x = b`` for SPD ``m`` via two triangular solves.

    ``b`` may be a vector ``(n,)``, a matrix ``(n, k)`` shared by every matrix
    in a stack, or a stack ``(..., n, k)`` matching the batch of ``m``. Only a
    1-d ``b`` is read as a vector.
    """
    return cho_solve(cholesky(m), b)


def symmetric_eig(m, tol=1e-14, max_sweeps=100):
    """Eigenvalues (ascending) and eigenvectors of one symmetric matrix."""
    a = np.array(m, dtype=np.float64, order="C")
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected square matrix, got shape {a.shape}")
    v = np.empty_like(a)
    sweeps = _backend.impl.jacobi_eigh(a, v, tol, max_sweeps)
    if sweeps < 0:
        raise NotPositiveDefinite("Jacobi iteration did not converge")
    w = np.diagonal(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def spd_sqrt(m):
    """Symmetric positive square root via eigendecomposition."""
    stack, shape = _as_stack(m)
    _check_symmetric(stack)
    _factor(stack)
    out = np.empty_like(stack)
    for i, a in enumerate(stack):
        w, v = symmetric_eig(a)
        if np.any(w <= 0.0):
            raise NotPositiveDefinite("non-positive eigenvalue in spd_sqrt", index=i)
        r = (v * np.sqrt(w)) @ v.T
        out[i] = 0.5 * (r + r.T)
    return out.reshape(shape)
