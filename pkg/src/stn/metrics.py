"""Metric zoo for comparing a query against support classes.

Every distance is oriented so that smaller means more similar. Global kinds
(``dot``, ``abs``, ``cos``, ``sqr``) compare class-token embeddings against
class prototypes; local kinds (``wass``, ``covar``, ``kl``) compare patch-token
sets through Gaussian fits.
"""
import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch, STNError, ZeroVector
from .numerics import (
    DEFAULT_EPSILON_SCALE,
    GaussianStats,
    cho_solve,
    cholesky,
    fit_gaussian,
    fit_gaussian_batch,
    log_det_spd,
    spd_solve,
    spd_sqrt,
)

GLOBAL_KINDS = ("dot", "abs", "cos", "sqr")
LOCAL_KINDS = ("wass", "covar", "kl")
METRIC_KINDS = GLOBAL_KINDS + LOCAL_KINDS
ZERO_NORM = 1e-12


def _vec(x):
    return np.asarray(x, dtype=np.float64)


def _same_dim(q, s):
    if q.shape != s.shape:
        raise DimensionMismatch(f"dimension mismatch: {q.shape} vs {s.shape}")


def prototype_global(class_embeddings):
    """Mean of the K support class-token embeddings of one class."""
    try:
        x = np.asarray(class_embeddings, dtype=np.float64)
    except ValueError as exc:
        raise DimensionMismatch("class embeddings have unequal dimensions") from exc
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionMismatch(f"expected (K, c) embeddings with K >= 1, got shape {x.shape}")
    return x.mean(axis=0)


def euclidean_sq(q, s):
    q, s = _vec(q), _vec(s)
    _same_dim(q, s)
    d = q - s
    return float(d @ d)


def global_metric(kind, q, s):
    q, s = _vec(q), _vec(s)
    _same_dim(q, s)
    if kind == "sqr":
        return euclidean_sq(q, s)
    if kind == "abs":
        return float(np.abs(q - s).sum())
    if kind == "dot":
        return -float(q @ s)
    if kind == "cos":
        nq, ns = np.linalg.norm(q), np.linalg.norm(s)
        if nq < ZERO_NORM or ns < ZERO_NORM:
            raise ZeroVector("cosine distance of a zero vector")
        return 1.0 - float(q @ s) / (nq * ns)
    raise ValueError(f"unknown global metric {kind!r}")


def kl_gaussian(q, s):
    """KL(q || s) between Gaussians, via Cholesky solves and log-determinants."""
    _same_dim(q.mu, s.mu)
    c = q.dim
    delta = s.mu - q.mu
    trace_term = np.trace(spd_solve(s.sigma, q.sigma))
    logdet_term = log_det_spd(s.sigma) - log_det_spd(q.sigma)
    maha = float(delta @ spd_solve(s.sigma, delta))
    return 0.5 * float(trace_term + logdet_term + maha - c)


def wasserstein2_sq(q, s):
    """Squared 2-Wasserstein distance between Gaussians."""
    _same_dim(q.mu, s.mu)
    root_s = spd_sqrt(s.sigma)
    cross = root_s @ q.sigma @ root_s
    cross = 0.5 * (cross + cross.T)
    d = q.mu - s.mu
    value = float(d @ d) + float(np.trace(q.sigma) + np.trace(s.sigma) - 2.0 * np.trace(spd_sqrt(cross)))
    return max(value, 0.0)


def covar_metric(query_locals, s):
    """Negated mean quadratic form of the unit-normalized query locals under ``s.sigma``."""
    x = np.asarray(query_locals, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != s.dim:
        raise DimensionMismatch(f"query locals of shape {x.shape} do not match dim {s.dim}")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms < ZERO_NORM):
        raise ZeroVector("zero local feature in covariance metric")
    u = x / norms[:, None]
    return -float(np.einsum("ia,ab,ib->i", u, s.sigma, u).mean())


def support_summaries(kind, support_global, support_local, epsilon_scale=DEFAULT_EPSILON_SCALE):
    """Per-class summaries for ``kind``.

    ``support_global`` is ``(N, K, c)`` and ``support_local`` ``(N, K, M, c)``.
    Global kinds get prototypes; local kinds get one Gaussian per class fit to
    all ``K * M`` pooled patch embeddings.
    """
    if kind in GLOBAL_KINDS:
        return [prototype_global(g) for g in np.asarray(support_global)]
    if kind in LOCAL_KINDS:
        loc = np.asarray(support_local, dtype=np.float64)
        pooled = loc.reshape(loc.shape[0], -1, loc.shape[-1])
        mu, sigma = fit_gaussian_batch(pooled, epsilon_scale)
        return [GaussianStats(m, s) for m, s in zip(mu, sigma)]
    raise ValueError(f"unknown metric kind {kind!r}")


def class_distance_vector(kind, query, supports, epsilon_scale=DEFAULT_EPSILON_SCALE):
    """Distances from one :class:`~stn.encoder.DualEmbedding` to each class summary."""
    if len(supports) < 2:
        raise DimensionMismatch("need at least two support classes")
    if kind in GLOBAL_KINDS:
        fn = lambda s: global_metric(kind, query.global_, s)  # noqa: E731
    elif kind == "covar":
        fn = lambda s: covar_metric(query.local, s)  # noqa: E731
    elif kind in ("kl", "wass"):
        qstats = fit_gaussian(query.local, epsilon_scale)
        pair = kl_gaussian if kind == "kl" else wasserstein2_sq
        fn = lambda s: pair(qstats, s)  # noqa: E731
    else:
        raise ValueError(f"unknown metric kind {kind!r}")
    out = np.empty(len(supports))
    for n, s in enumerate(supports):
        try:
            out[n] = fn(s)
        except STNError as exc:
            exc.class_index = n
            raise
    return out


# Batched evaluation path: (queries x classes) distance matrices.


def kl_matrix(mu_q, sigma_q, mu_s, sigma_s):
    """``KL(query_i || class_n)`` for all pairs; returns ``(nq, N)``."""
    c = mu_q.shape[-1]
    try:
        Ls = cholesky(sigma_s)
    except STNError as exc:
        # the failing stack index is the class index
        if getattr(exc, "index", None) is not None:
            exc.class_index = exc.index
        raise
    prec_s = cho_solve(Ls, np.eye(c))
    logdet_s = 2.0 * np.log(np.diagonal(Ls, axis1=-2, axis2=-1)).sum(-1)
    logdet_q = log_det_spd(sigma_q)
    trace = np.einsum("nab,iab->in", prec_s, sigma_q)
    delta = mu_s[None, :, :] - mu_q[:, None, :]
    maha = np.einsum("inc,ncd,ind->in", delta, prec_s, delta)
    return 0.5 * (trace + logdet_s[None, :] - logdet_q[:, None] + maha - c)


def distance_matrix(kind, query_global, query_local, support_global, support_local,
                    epsilon_scale=DEFAULT_EPSILON_SCALE):
    """Distances of every query to every support class.

    Shapes: ``query_global (nq, c)``, ``query_local (nq, M, c)``,
    ``support_global (N, K, c)``, ``support_local (N, K, M, c)``.
    """
    if kind in GLOBAL_KINDS:
        protos = np.asarray(support_global, dtype=np.float64).mean(axis=1)
        q = np.asarray(query_global, dtype=np.float64)
        if kind == "sqr":
            diff = q[:, None, :] - protos[None, :, :]
            return np.einsum("inc,inc->in", diff, diff)
        if kind == "abs":
            return np.abs(q[:, None, :] - protos[None, :, :]).sum(-1)
        if kind == "dot":
            return -(q @ protos.T)
        if kind == "cos":
            nq, ns = np.linalg.norm(q, axis=1), np.linalg.norm(protos, axis=1)
            if np.any(nq < ZERO_NORM) or np.any(ns < ZERO_NORM):
                raise ZeroVector("cosine distance of a zero vector")
            return 1.0 - (q @ protos.T) / (nq[:, None] * ns[None, :])
    if kind not in LOCAL_KINDS:
        raise ValueError(f"unknown metric kind {kind!r}")
    sl = np.asarray(support_local, dtype=np.float64)
    mu_s, sigma_s = fit_gaussian_batch(sl.reshape(sl.shape[0], -1, sl.shape[-1]), epsilon_scale)
    ql = np.asarray(query_local, dtype=np.float64)
    if kind == "covar":
        norms = np.linalg.norm(ql, axis=-1)
        if np.any(norms < ZERO_NORM):
            raise ZeroVector("zero local feature in covariance metric")
        u = ql / norms[..., None]
        return -np.einsum("ima,nab,imb->in", u, sigma_s, u) / ql.shape[1]
    mu_q, sigma_q = fit_gaussian_batch(ql, epsilon_scale)
    if kind == "kl":
        return kl_matrix(mu_q, sigma_q, mu_s, sigma_s)
    out = np.empty((ql.shape[0], sl.shape[0]))
    supports = [GaussianStats(m, s) for m, s in zip(mu_s, sigma_s)]
    for i in range(ql.shape[0]):
        qs = GaussianStats(mu_q[i], sigma_q[i])
        for n, s in enumerate(supports):
            out[i, n] = wasserstein2_sq(qs, s)
    return out


# Differentiable heads used by training.


def sq_euclidean_tensor(query_global, prototypes):
    """``(nq, c)`` and ``(N, c)`` tensors -> ``(nq, N)`` squared distances."""
    diff = ad.reshape(query_global, (query_global.shape[0], 1, -1)) - ad.reshape(
        prototypes, (1,) + prototypes.shape
    )
    return ad.tsum(diff * diff, axis=-1)


def prototypes_tensor(support_global, n_way, k_shot):
    """Support class tokens ordered class-major ``(N*K, c)`` -> ``(N, c)`` means."""
    return ad.mean(ad.reshape(support_global, (n_way, k_shot, -1)), axis=1)


def fit_gaussian_tensor(samples, epsilon_scale=DEFAULT_EPSILON_SCALE):
    """Differentiable version of :func:`~stn.numerics.fit_gaussian_batch` for ``(B, M, c)``."""
    m, c = samples.shape[-2], samples.shape[-1]
    mu = ad.mean(samples, axis=-2)
    centered = samples - ad.reshape(mu, mu.shape[:-1] + (1, c))
    raw = ad.matmul(ad.transpose(centered), centered) * (1.0 / m)
    eye = np.eye(c)
    mean_eig = ad.tsum(raw * eye, axis=(-2, -1)) * (1.0 / c)
    eps = ad.clamp_min(mean_eig, 1e-8) * epsilon_scale
    sigma = raw + ad.reshape(eps, eps.shape + (1, 1)) * eye
    return mu, sigma


def kl_tensor(mu_q, sigma_q, mu_s, sigma_s):
    """Differentiable ``(nq, N)`` KL matrix with closed-form adjoints.

    The backward pass uses the precision matrices obtained from the Cholesky
    factors (triangular solves against the identity).
    """
    c = mu_q.shape[-1]
    Ls = cholesky(sigma_s.data)
    Lq = cholesky(sigma_q.data)
    eye = np.eye(c)
    prec_s = cho_solve(Ls, eye)
    logdet_s = 2.0 * np.log(np.diagonal(Ls, axis1=-2, axis2=-1)).sum(-1)
    logdet_q = 2.0 * np.log(np.diagonal(Lq, axis1=-2, axis2=-1)).sum(-1)
    sq = sigma_q.data
    trace = np.einsum("nab,iab->in", prec_s, sq)
    delta = mu_s.data[None, :, :] - mu_q.data[:, None, :]
    pdelta = np.einsum("ncd,ind->inc", prec_s, delta)
    maha = np.einsum("inc,inc->in", delta, pdelta)
    value = 0.5 * (trace + logdet_s[None, :] - logdet_q[:, None] + maha - c)

    def backward(g):
        if mu_q.requires_grad:
            mu_q._accumulate(-np.einsum("in,inc->ic", g, pdelta))
        if mu_s.requires_grad:
            mu_s._accumulate(np.einsum("in,inc->nc", g, pdelta))
        if sigma_q.requires_grad:
            prec_q = cho_solve(Lq, eye)
            gq = 0.5 * (np.einsum("in,nab->iab", g, prec_s) - g.sum(1)[:, None, None] * prec_q)
            sigma_q._accumulate(gq)
        if sigma_s.requires_grad:
            inner = np.einsum("in,iab->nab", g, sq) + np.einsum("in,ina,inb->nab", g, delta, delta)
            gs = 0.5 * (g.sum(0)[:, None, None] * prec_s - prec_s @ inner @ prec_s)
            sigma_s._accumulate(gs)

    return ad.Tensor(value, parents=(mu_q, sigma_q, mu_s, sigma_s), backward=backward)
