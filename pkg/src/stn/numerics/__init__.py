"""Numerical kernels: Cholesky-based SPD algebra and Gaussian estimation."""
from . import _backend
from ._backend import available as available_backends, set_backend
from .gaussian import (
    DEFAULT_EPSILON_SCALE,
    GaussianStats,
    fit_gaussian,
    fit_gaussian_batch,
    shrinkage,
)
from .linalg import (
    cho_solve,
    cholesky,
    log_det_spd,
    solve_lower,
    solve_upper_t,
    spd_solve,
    spd_sqrt,
    symmetric_eig,
)


def backend_name():
    return _backend.name


__all__ = [
    "DEFAULT_EPSILON_SCALE",
    "GaussianStats",
    "available_backends",
    "backend_name",
    "cho_solve",
    "cholesky",
    "fit_gaussian",
    "fit_gaussian_batch",
    "log_det_spd",
    "set_backend",
    "shrinkage",
    "solve_lower",
    "solve_upper_t",
    "spd_solve",
    "spd_sqrt",
    "symmetric_eig",
]
