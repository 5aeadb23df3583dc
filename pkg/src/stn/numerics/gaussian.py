"""Gaussian fits to local-feature sets."""
from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch

VARIANCE_FLOOR = 1e-8
DEFAULT_EPSILON_SCALE = 1e-2


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def dim(self):
        return self.mu.shape[-1]


def shrinkage(raw_cov, epsilon_scale):
    """Ridge size for a raw covariance (stack): scale times mean eigenvalue, floored."""
    c = raw_cov.shape[-1]
    mean_eig = np.trace(raw_cov, axis1=-2, axis2=-1) / c
    return epsilon_scale * np.maximum(mean_eig, VARIANCE_FLOOR)


def fit_gaussian_batch(samples, epsilon_scale=DEFAULT_EPSILON_SCALE):
    """Fit one Gaussian per leading index of ``samples`` with shape ``(..., M, c)``.

    Returns ``(mu, sigma)`` arrays of shapes ``(..., c)`` and ``(..., c, c)``.
    The covariance is the maximum-likelihood estimate plus a ridge
    ``eps * I`` (see :func:`shrinkage`), so it is positive definite even for
    ``M < c``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise DimensionMismatch(f"need at least one sample, got shape {x.shape}")
    if not epsilon_scale > 0:
        raise ValueError("epsilon_scale must be positive")
    m = x.shape[-2]
    mu = x.mean(axis=-2)
    centered = x - mu[..., None, :]
    raw = np.swapaxes(centered, -1, -2) @ centered / m
    raw = 0.5 * (raw + np.swapaxes(raw, -1, -2))
    eps = shrinkage(raw, epsilon_scale)
    sigma = raw + eps[..., None, None] * np.eye(x.shape[-1])
    return mu, sigma


def fit_gaussian(samples, epsilon_scale=DEFAULT_EPSILON_SCALE):
    """Fit a shrunk maximum-likelihood Gaussian to a list of equal-length vectors."""
    try:
        x = np.asarray(samples, dtype=np.float64)
    except ValueError as exc:
        raise DimensionMismatch("samples have unequal dimensions") from exc
    if x.ndim != 2:
        raise DimensionMismatch(f"samples must form an (M, c) array, got shape {x.shape}")
    mu, sigma = fit_gaussian_batch(x, epsilon_scale)
    return GaussianStats(mu, sigma)
