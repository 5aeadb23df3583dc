"""Episode-level evaluation with 95% confidence intervals."""
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..encoder import encode_batch
from ..errors import InvalidConfig
from ..fusion import FusionConfig, classify, fuse_adaptive, fuse_manual
from ..metrics import GLOBAL_KINDS, LOCAL_KINDS, distance_matrix
from .data import sample_episode

EVAL_STREAM = 0x5E7A1


def worker_count():
    """Worker threads from ``STN_THREADS`` (0 or unset = one per CPU)."""
    raw = os.environ.get("STN_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise InvalidConfig(f"STN_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise InvalidConfig("STN_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def ordered_map(fn, items):
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def task_rng(seed, task_id):
    """Independent generator for evaluation task ``task_id``.

    Task ``i`` sees the same stream regardless of how many tasks run.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), EVAL_STREAM], spawn_key=(int(task_id),)))


def ci95(accuracies):
    """``1.96 * std / sqrt(n)`` with the sample (n - 1) standard deviation."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size < 2:
        return 0.0
    return float(1.96 * a.std(ddof=1) / np.sqrt(a.size))


@dataclass
class EvalReport:
    task_accuracies: list
    mean: float
    ci95: float
    config: dict = field(default_factory=dict)

    @classmethod
    def from_accuracies(cls, accuracies, config=None):
        accs = [float(a) for a in accuracies]
        return cls(accs, float(np.mean(accs)) if accs else 0.0, ci95(accs), dict(config or {}))

    def summary(self):
        return {"mean": self.mean, "ci95": self.ci95, "tasks": len(self.task_accuracies), "config": self.config}

    def csv_rows(self, n_way, k_shot):
        return [(i, n_way, k_shot, a) for i, a in enumerate(self.task_accuracies)]


@dataclass
class TaskDistances:
    """Per-kind ``(nq, N)`` distance matrices of one task plus query labels."""

    labels: np.ndarray
    distances: dict


def embed_episode(global_params, local_params, episode, encoder_config):
    """Class-major support and query embeddings from both branches.

    Returns a dict with ``support_global (N, K, c)``, ``query_global (nq, c)``,
    ``support_local (N, K, M, c)`` and ``query_local (nq, M, c)``.
    """
    n, k = episode.n_way, episode.k_shot
    ns = n * k
    images = np.concatenate([episode.support_images, episode.query_images])
    out = {}
    if global_params is not None:
        g, l = encode_batch(global_params, images, encoder_config)
        out["support_global"] = g[:ns].reshape(n, k, -1)
        out["query_global"] = g[ns:]
        if local_params is global_params:
            out["support_local"] = l[:ns].reshape(n, k, *l.shape[1:])
            out["query_local"] = l[ns:]
            return out
    if local_params is not None:
        _, l = encode_batch(local_params, images, encoder_config)
        out["support_local"] = l[:ns].reshape(n, k, *l.shape[1:])
        out["query_local"] = l[ns:]
    return out


def episode_distances(emb, kinds, epsilon_scale):
    return {
        kind: distance_matrix(
            kind,
            emb.get("query_global"),
            emb.get("query_local"),
            emb.get("support_global"),
            emb.get("support_local"),
            epsilon_scale,
        )
        for kind in kinds
    }


def collect_distances(global_params, local_params, dataset, run, tasks, seed, kinds=None):
    """Sample ``tasks`` episodes and compute the requested distance matrices."""
    kinds = tuple(kinds or (run.global_kind, run.local_kind))
    if any(k in GLOBAL_KINDS for k in kinds) and global_params is None:
        raise InvalidConfig("global metric requested without global-branch parameters")
    if any(k in LOCAL_KINDS for k in kinds) and local_params is None:
        raise InvalidConfig("local metric requested without local-branch parameters")

    def one(task_id):
        ep = sample_episode(dataset, run.n_way, run.k_shot, run.t_query, task_rng(seed, task_id))
        emb = embed_episode(
            global_params if any(k in GLOBAL_KINDS for k in kinds) else None,
            local_params if any(k in LOCAL_KINDS for k in kinds) else None,
            ep,
            run.encoder,
        )
        return TaskDistances(ep.query_labels, episode_distances(emb, kinds, run.epsilon_scale))

    return ordered_map(one, range(tasks))


def task_accuracy(similarity, labels):
    return float(np.mean(classify(similarity) == labels))


def fused_similarity(td, fusion, global_kind, local_kind, adaptive=None):
    d_ed, d_kl = td.distances[global_kind], td.distances[local_kind]
    if fusion.mode == "adaptive":
        if adaptive is None:
            raise InvalidConfig("adaptive fusion needs trained AdaptiveFusionParams")
        return fuse_adaptive(d_kl, d_ed, adaptive)
    return fuse_manual(d_kl, d_ed, fusion)


def score_tasks(task_distances, similarity_fn):
    return [task_accuracy(similarity_fn(td), td.labels) for td in task_distances]


def eval_config(run, tasks, seed, fusion, global_kind, local_kind, extra=None):
    cfg = {
        "tasks": int(tasks),
        "seed": int(seed),
        "n_way": run.n_way,
        "k_shot": run.k_shot,
        "t_query": run.t_query,
        "epsilon_scale": run.epsilon_scale,
        "global_kind": global_kind,
        "local_kind": local_kind,
        "fusion": fusion.to_dict(),
        "encoder": run.encoder.to_dict(),
    }
    cfg.update(extra or {})
    return cfg


def evaluate(global_params, local_params, dataset, run, tasks=200, seed=None, *, fusion=None,
             global_kind=None, local_kind=None, adaptive=None, scorer=None):
    """Fused few-shot accuracy over ``tasks`` sampled episodes.

    ``scorer(task_distances) -> (nq, N) similarity`` replaces the fusion rule
    when given (used to inject reference similarities).
    """
    seed = run.seed if seed is None else seed
    fusion = fusion or run.fusion
    global_kind = global_kind or run.global_kind
    local_kind = local_kind or run.local_kind
    tds = collect_distances(global_params, local_params, dataset, run, tasks, seed, (global_kind, local_kind))
    if scorer is None:
        scorer = lambda td: fused_similarity(td, fusion, global_kind, local_kind, adaptive)  # noqa: E731
    accs = score_tasks(tds, scorer)
    return EvalReport.from_accuracies(accs, eval_config(run, tasks, seed, fusion, global_kind, local_kind))


def evaluate_single_branch(params, dataset, run, tasks=200, seed=None, kind="sqr"):
    """Nearest-class accuracy of one branch alone (argmin of its distances)."""
    seed = run.seed if seed is None else seed
    g = params if kind in GLOBAL_KINDS else None
    l = params if kind in LOCAL_KINDS else None
    tds = collect_distances(g, l, dataset, run, tasks, seed, (kind,))
    accs = score_tasks(tds, lambda td: -td.distances[kind])
    fusion = FusionConfig(alpha=0.0 if kind in GLOBAL_KINDS else 1.0)
    gk, lk = (kind, None) if kind in GLOBAL_KINDS else (None, kind)
    return EvalReport.from_accuracies(accs, eval_config(run, tasks, seed, fusion, gk, lk, {"single_branch": kind}))


def sweep_alpha(global_params, local_params, dataset, run, grid, tasks=200, seed=None, normalize=None):
    """Fused accuracy for each ``alpha`` in ``grid`` on one shared set of tasks."""
    seed = run.seed if seed is None else seed
    normalize = run.fusion.normalize if normalize is None else normalize
    tds = collect_distances(global_params, local_params, dataset, run, tasks, seed)
    out = []
    for alpha in grid:
        fusion = FusionConfig(alpha=float(alpha), normalize=normalize)
        accs = score_tasks(tds, lambda td: fused_similarity(td, fusion, run.global_kind, run.local_kind))
        cfg = eval_config(run, tasks, seed, fusion, run.global_kind, run.local_kind)
        out.append((float(alpha), EvalReport.from_accuracies(accs, cfg)))
    return out


def ablate_metrics(global_params, local_params, dataset, run, global_kinds, local_kinds, tasks=200, seed=None):
    """Single-metric rows and the full global x local fused cross table."""
    seed = run.seed if seed is None else seed
    tds = collect_distances(global_params, local_params, dataset, run, tasks, seed,
                            tuple(global_kinds) + tuple(local_kinds))
    rows = []
    for kind in tuple(global_kinds) + tuple(local_kinds):
        accs = score_tasks(tds, lambda td: -td.distances[kind])
        rows.append({"global_kind": kind if kind in GLOBAL_KINDS else "",
                     "local_kind": kind if kind in LOCAL_KINDS else "",
                     "report": EvalReport.from_accuracies(accs)})
    for gk in global_kinds:
        for lk in local_kinds:
            accs = score_tasks(tds, lambda td: fused_similarity(td, run.fusion, gk, lk))
            rows.append({"global_kind": gk, "local_kind": lk, "report": EvalReport.from_accuracies(accs)})
    return rows
