"""Dual-branch episodic meta-training.

Each branch owns an encoder and its own loss: the global branch minimizes
cross-entropy over negated prototype distances of class tokens, the local
branch over negated KL divergences between patch-token Gaussians. The two
parameter sets never exchange gradients unless ``share_params`` is set.
"""
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..encoder import grad, init_params
from ..errors import InvalidConfig, NonFiniteLoss
from ..fusion import AdaptiveFusionParams, adaptive_similarity_tensor, update_running_stats
from ..metrics import (
    fit_gaussian_tensor,
    kl_tensor,
    prototypes_tensor,
    sq_euclidean_tensor,
)
from .data import sample_episode
from .evaluation import embed_episode, episode_distances, fused_similarity, task_accuracy, TaskDistances
from .tensorio import atomic_write_text, save_tensors

log = logging.getLogger(__name__)

TRAIN_STREAM = 0x7A1


def cosine_lr(step, total, lr, lr_min):
    if total <= 1:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * step / (total - 1)))


class AdamW:
    """Adam with decoupled weight decay on parameters of rank >= 2."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.05):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        """Return a new parameter dict; ``params`` itself is left untouched."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            decay = self.weight_decay * p if p.ndim >= 2 else 0.0
            out[k] = p - lr * (update + decay)
        return out


# Differentiable per-branch distances.


def global_distances(g, n_way, k_shot, kind="sqr"):
    ns = n_way * k_shot
    protos = prototypes_tensor(g[:ns], n_way, k_shot)
    q = g[ns:]
    if kind == "sqr":
        return sq_euclidean_tensor(q, protos)
    if kind == "dot":
        return ad.neg(ad.matmul(q, ad.transpose(protos)))
    if kind == "abs":
        diff = ad.reshape(q, (q.shape[0], 1, -1)) - ad.reshape(protos, (1,) + protos.shape)
        return ad.tsum(ad.tabs(diff), axis=-1)
    if kind == "cos":
        qn = ad.sqrt(ad.tsum(q * q, axis=-1, keepdims=True))
        pn = ad.sqrt(ad.tsum(protos * protos, axis=-1, keepdims=True))
        return 1.0 - ad.matmul(q / qn, ad.transpose(protos / pn))
    raise InvalidConfig(f"no trainable global head for {kind!r}")


def local_distances(l, n_way, k_shot, epsilon_scale, kind="kl"):
    ns = n_way * k_shot
    m, c = l.shape[1], l.shape[2]
    pooled = ad.reshape(l[:ns], (n_way, k_shot * m, c))
    mu_s, sigma_s = fit_gaussian_tensor(pooled, epsilon_scale)
    q = l[ns:]
    if kind == "kl":
        mu_q, sigma_q = fit_gaussian_tensor(q, epsilon_scale)
        return kl_tensor(mu_q, sigma_q, mu_s, sigma_s)
    if kind == "covar":
        u = q / ad.sqrt(ad.tsum(q * q, axis=-1, keepdims=True))
        # (nq, M, c) x (N, c, c) -> (nq, N)
        proj = ad.matmul(ad.reshape(u, (u.shape[0], 1, m, c)), ad.reshape(sigma_s, (1, n_way, c, c)))
        quad = ad.tsum(proj * ad.reshape(u, (u.shape[0], 1, m, c)), axis=-1)
        return ad.neg(ad.mean(quad, axis=-1))
    raise InvalidConfig(f"no trainable local head for {kind!r}")


def branch_loss_fn(branch, episode, run, parts=None):
    """Scalar loss closure over encoder outputs for ``"global"``, ``"local"`` or ``"both"``.

    When ``parts`` is a dict the individual branch loss values are stored in it.
    """
    n, k = episode.n_way, episode.k_shot
    labels = episode.query_labels

    def loss(g, l):
        terms = {}
        if branch in ("global", "both"):
            terms["global"] = ad.cross_entropy_from_distances(global_distances(g, n, k, run.global_kind), labels)
        if branch in ("local", "both"):
            d = local_distances(l, n, k, run.epsilon_scale, run.local_kind)
            terms["local"] = ad.cross_entropy_from_distances(d, labels)
        if parts is not None:
            parts.update({name: float(t.data) for name, t in terms.items()})
        total = None
        for t in terms.values():
            total = t if total is None else total + t
        return total

    return loss


def episode_images(episode):
    return np.concatenate([episode.support_images, episode.query_images])


@dataclass
class TrainingLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    best_epoch: int = 0

    STEP_FIELDS = ("epoch", "episode", "step", "lr", "loss_global", "loss_local")
    EPOCH_FIELDS = ("epoch", "val_fused", "val_global", "val_local", "best")

    def to_csv(self, which="steps"):
        rows = self.steps if which == "steps" else self.epochs
        names = self.STEP_FIELDS if which == "steps" else self.EPOCH_FIELDS
        lines = [",".join(names)]
        for r in rows:
            lines.append(",".join(_fmt(r[n]) for n in names))
        return "\n".join(lines) + "\n"

    def write(self, steps_path, epochs_path):
        atomic_write_text(steps_path, self.to_csv("steps"))
        atomic_write_text(epochs_path, self.to_csv("epochs"))

    def series(self, key):
        return np.array([r[key] for r in self.steps], dtype=np.float64)


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def validation_episodes(dataset, run, seed_seq):
    rng = np.random.default_rng(seed_seq)
    return [sample_episode(dataset, run.n_way, run.k_shot, run.t_query, rng) for _ in range(run.val_episodes)]


def validate(global_params, local_params, episodes, run):
    """Mean fused, global-only and local-only accuracy over fixed episodes."""
    fused, glob, loc = [], [], []
    kinds = (run.global_kind, run.local_kind)
    fusion = run.fusion if run.fusion.mode == "manual" else run.with_fusion(mode="manual").fusion
    for ep in episodes:
        emb = embed_episode(global_params, local_params, ep, run.encoder)
        td = TaskDistances(ep.query_labels, episode_distances(emb, kinds, run.epsilon_scale))
        fused.append(task_accuracy(fused_similarity(td, fusion, *kinds), td.labels))
        glob.append(task_accuracy(-td.distances[run.global_kind], td.labels))
        loc.append(task_accuracy(-td.distances[run.local_kind], td.labels))
    return float(np.mean(fused)), float(np.mean(glob)), float(np.mean(loc))


def _branch_step(params, opt, branch, episode, run, lr):
    value, grads = grad(params, branch_loss_fn(branch, episode, run), episode_images(episode), run.encoder)
    return opt.step(params, grads, lr), value


def meta_train(run, dataset, replay_path=None, progress=None):
    """Train both branches on episodes from ``dataset`` (its ``train`` split is
    used when the dataset is not already a single split).

    Returns ``(global_params, local_params, TrainingLog)``. The returned
    parameters are the snapshot with the best fused validation accuracy; with
    ``share_params`` both names refer to one dict.

    Raises
    ------
    NonFiniteLoss
        With ``.episode`` attached (and written to ``replay_path`` if given).
    """
    train = dataset if dataset.split is not None else dataset.subset("train")
    val = None
    if dataset.split is None and any(s == "val" for s in dataset.class_splits.values()):
        val = dataset.subset("val")
    streams = np.random.SeedSequence([int(run.seed), TRAIN_STREAM]).spawn(4)
    g_seed, l_seed = (int(s.generate_state(1)[0]) for s in streams[:2])
    episode_rng = np.random.default_rng(streams[2])
    gp = init_params(run.encoder, g_seed)
    lp = gp if run.share_params else init_params(run.encoder, l_seed)
    log_ = TrainingLog()
    if run.epochs == 0:
        return gp, lp, log_
    val_eps = validation_episodes(val, run, streams[3]) if val is not None else None
    g_opt = AdamW(gp, run.beta1, run.beta2, run.adam_eps, run.weight_decay)
    l_opt = None if run.share_params else AdamW(lp, run.beta1, run.beta2, run.adam_eps, run.weight_decay)
    total = run.epochs * run.episodes_per_epoch
    best = (-1.0, gp, lp)
    step = 0
    for epoch in range(1, run.epochs + 1):
        for e in range(run.episodes_per_epoch):
            ep = sample_episode(train, run.n_way, run.k_shot, run.t_query, episode_rng)
            lr = cosine_lr(step, total, run.lr, run.lr_min)
            try:
                if run.share_params:
                    parts = {}
                    _, grads = grad(gp, branch_loss_fn("both", ep, run, parts), episode_images(ep), run.encoder)
                    gp = lp = g_opt.step(gp, grads, lr)
                    loss_g, loss_l = parts["global"], parts["local"]
                else:
                    gp, loss_g = _branch_step(gp, g_opt, "global", ep, run, lr)
                    lp, loss_l = _branch_step(lp, l_opt, "local", ep, run, lr)
            except NonFiniteLoss as exc:
                exc.episode = ep
                if replay_path is not None:
                    save_tensors(replay_path, ep.to_tensors())
                    exc.replay_path = replay_path
                raise
            log_.steps.append(
                {"epoch": epoch, "episode": e, "step": step, "lr": lr, "loss_global": loss_g, "loss_local": loss_l}
            )
            step += 1
        if val_eps is not None:
            vf, vg, vl = validate(gp, lp, val_eps, run)
        else:
            vf = vg = vl = float("nan")
        improved = val_eps is None or vf > best[0]
        if improved:
            best = (vf if val_eps is not None else -1.0, gp, lp)
            log_.best_epoch = epoch
        log_.epochs.append({"epoch": epoch, "val_fused": vf, "val_global": vg, "val_local": vl, "best": int(improved)})
        log.info("epoch %d: val fused %.4f global %.4f local %.4f", epoch, vf, vg, vl)
        if progress is not None:
            progress(epoch, log_)
    return best[1], best[2], log_


def train_adaptive_fusion(global_params, local_params, dataset, run, episodes=100, lr=1e-2, seed=None,
                          normalize=True):
    """Fit the two adaptive fusion weights on training episodes with frozen encoders.

    With ``normalize=False`` the branches are not standardized: the statistics
    stay fixed at mean 0 and variance 1.
    """
    train = dataset if dataset.split is not None else dataset.subset("train")
    seed = run.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), TRAIN_STREAM, 1]))
    params = AdaptiveFusionParams()
    m, v = np.zeros(2), np.zeros(2)
    kinds = (run.global_kind, run.local_kind)
    for t in range(1, episodes + 1):
        ep = sample_episode(train, run.n_way, run.k_shot, run.t_query, rng)
        emb = embed_episode(global_params, local_params, ep, run.encoder)
        d = episode_distances(emb, kinds, run.epsilon_scale)
        w = ad.parameter(params.weight)
        stats = None if normalize else (params.running_mean, params.running_var)
        sim, means, vars_ = adaptive_similarity_tensor(d[run.local_kind], d[run.global_kind], w, stats)
        loss = ad.cross_entropy_from_distances(ad.neg(sim), ep.query_labels)
        loss.backward()
        g = w.grad
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        params.weight = params.weight - lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        if normalize:
            update_running_stats(params, means, vars_)
    return params
