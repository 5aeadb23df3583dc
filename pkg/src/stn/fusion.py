"""Fusing the global and local distance vectors into one similarity vector."""
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InvalidConfig, LengthMismatch, NonFiniteInput

NORM_EPS = 1e-12


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.7
    normalize: bool = True
    mode: str = "manual"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidConfig(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mode not in ("manual", "adaptive"):
            raise InvalidConfig(f"unknown fusion mode {self.mode!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdaptiveFusionParams:
    """Learnable branch weights plus per-branch normalization statistics.

    Index 0 is the local (KL) branch, index 1 the global (Euclidean) branch.
    """

    weight: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))
    running_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    running_var: np.ndarray = field(default_factory=lambda: np.ones(2))
    momentum: float = 0.1

    def to_dict(self):
        return {
            "weight": self.weight.tolist(),
            "running_mean": self.running_mean.tolist(),
            "running_var": self.running_var.tolist(),
            "momentum": self.momentum,
        }


def l2_normalize(v, axis=-1):
    """Scale to unit L2 norm along ``axis``; near-zero vectors pass through unchanged."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    safe = np.where(norm > NORM_EPS, norm, 1.0)
    return v / safe


def _pair(d_kl, d_ed):
    d_kl = np.asarray(d_kl, dtype=np.float64)
    d_ed = np.asarray(d_ed, dtype=np.float64)
    if d_kl.shape != d_ed.shape:
        raise LengthMismatch(f"branch vectors differ in shape: {d_kl.shape} vs {d_ed.shape}")
    return d_kl, d_ed


def fuse_manual(d_kl, d_ed, config):
    """``-alpha * d_kl - (1 - alpha) * d_ed`` after optional per-vector L2 normalization.

    Accepts single vectors ``(N,)`` or stacks ``(nq, N)`` (normalized per row).
    """
    d_kl, d_ed = _pair(d_kl, d_ed)
    if config.mode != "manual":
        raise InvalidConfig("fuse_manual needs a manual-mode FusionConfig")
    if config.normalize:
        d_kl, d_ed = l2_normalize(d_kl), l2_normalize(d_ed)
    return -config.alpha * d_kl - (1.0 - config.alpha) * d_ed


def _standardize(d, mean, var):
    return (d - mean) / np.sqrt(var)


def fuse_adaptive(d_kl, d_ed, params):
    """Inference-time adaptive fusion using the running statistics."""
    d_kl, d_ed = _pair(d_kl, d_ed)
    zk = _standardize(d_kl, params.running_mean[0], params.running_var[0])
    ze = _standardize(d_ed, params.running_mean[1], params.running_var[1])
    return -params.weight[0] * zk - params.weight[1] * ze


def adaptive_similarity_tensor(d_kl, d_ed, weight, stats=None):
    """Differentiable fusion over a batch ``(nq, N)`` of branch distances.

    With ``stats=None`` each branch is standardized with its batch mean and
    variance (training mode); otherwise ``stats = (mean, var)`` arrays of length 2
    are used as constants. ``weight`` is a length-2 tensor.
    Returns ``(similarity tensor, batch_means, batch_vars)``.
    """
    d_kl, d_ed = _pair(d_kl, d_ed)
    if stats is None:
        means = np.array([d_kl.mean(), d_ed.mean()])
        vars_ = np.array([d_kl.var(), d_ed.var()]) + NORM_EPS
    else:
        means, vars_ = (np.asarray(s, dtype=np.float64) for s in stats)
    zk = _standardize(d_kl, means[0], vars_[0])
    ze = _standardize(d_ed, means[1], vars_[1])
    sim = ad.neg(ad.add(ad.mul(weight[0], zk), ad.mul(weight[1], ze)))
    return sim, means, vars_


def update_running_stats(params, batch_means, batch_vars):
    m = params.momentum
    params.running_mean = (1 - m) * params.running_mean + m * batch_means
    params.running_var = (1 - m) * params.running_var + m * batch_vars


def classify(similarity):
    """Index of the largest similarity; ties go to the lowest index."""
    s = np.asarray(similarity, dtype=np.float64)
    if s.size == 0:
        raise LengthMismatch("empty similarity vector")
    if not np.all(np.isfinite(s)):
        raise NonFiniteInput("similarity vector has non-finite entries")
    return np.argmax(s, axis=-1)
