import numpy as np
import pytest

from stn.encoder import EncoderConfig, encode_batch, init_params
from stn.episodic import RunConfig, evaluate, evaluate_single_branch, gen_synthetic, sample_episode, sweep_alpha
from stn.episodic.evaluation import EvalReport, ablate_metrics, ci95, task_rng
from stn.errors import InvalidConfig
from stn.fusion import FusionConfig
from stn.metrics import kl_gaussian
from stn.numerics import fit_gaussian

TINY = EncoderConfig(embed_dim=16, depth=1, heads=2)


@pytest.fixture(scope="module")
def setup():
    ds = gen_synthetic(15, 8, seed=1).subset("test")
    run = RunConfig(n_way=3, k_shot=1, t_query=3, encoder=TINY)
    return ds, run, init_params(TINY, 1), init_params(TINY, 2)


def test_two_point_interval():
    assert ci95([0.6, 0.8]) == pytest.approx(1.96 * np.std([0.6, 0.8], ddof=1) / np.sqrt(2), rel=1e-14)
    assert ci95([0.6, 0.8]) == pytest.approx(0.196, abs=1e-3)
    r = EvalReport.from_accuracies([0.6, 0.8])
    assert r.mean == pytest.approx(0.7) and r.ci95 == pytest.approx(0.19600, abs=1e-5)
    assert ci95([0.9]) == 0.0


def test_oracle_similarity(setup):
    ds, run, gp, lp = setup

    def oracle(td):
        s = np.zeros((len(td.labels), run.n_way))
        s[np.arange(len(td.labels)), td.labels] = 1.0
        return s

    r = evaluate(gp, lp, ds, run, tasks=6, scorer=oracle)
    assert r.mean == 1.0 and r.ci95 == 0.0


def reference_task_accuracy(gp, lp, ds, run, seed, task_id):
    """One task evaluated from scratch with per-pair metric functions."""
    ep = sample_episode(ds, run.n_way, run.k_shot, run.t_query, task_rng(seed, task_id))
    gs, _ = encode_batch(gp, ep.support_images, run.encoder)
    gq, _ = encode_batch(gp, ep.query_images, run.encoder)
    _, ls = encode_batch(lp, ep.support_images, run.encoder)
    _, lq = encode_batch(lp, ep.query_images, run.encoder)
    k = run.k_shot
    protos = [gs[n * k:(n + 1) * k].mean(0) for n in range(run.n_way)]
    gauss = [fit_gaussian(ls[n * k:(n + 1) * k].reshape(-1, ls.shape[-1]), run.epsilon_scale) for n in range(run.n_way)]
    correct = 0
    for i in range(len(gq)):
        d_ed = np.array([np.sum((gq[i] - p) ** 2) for p in protos])
        qs = fit_gaussian(lq[i], run.epsilon_scale)
        d_kl = np.array([kl_gaussian(qs, s) for s in gauss])
        a = run.fusion.alpha
        s = -a * d_kl / np.linalg.norm(d_kl) - (1 - a) * d_ed / np.linalg.norm(d_ed)
        correct += int(np.argmax(s) == ep.query_labels[i])
    return correct / len(gq)


def test_matches_independent_single_task_evaluations(setup):
    ds, run, gp, lp = setup
    r = evaluate(gp, lp, ds, run, tasks=5, seed=3)
    expected = [reference_task_accuracy(gp, lp, ds, run, 3, t) for t in range(5)]
    np.testing.assert_allclose(r.task_accuracies, expected)
    assert r.mean == pytest.approx(np.mean(expected))


def test_prefix_stability(setup):
    ds, run, gp, lp = setup
    a = evaluate(gp, lp, ds, run, tasks=3, seed=4).task_accuracies
    b = evaluate(gp, lp, ds, run, tasks=6, seed=4).task_accuracies
    assert b[:3] == a


def test_alpha_zero_equals_global_only(setup):
    ds, run, gp, lp = setup
    fused = evaluate(gp, lp, ds, run, tasks=8, seed=5, fusion=FusionConfig(alpha=0.0))
    single = evaluate_single_branch(gp, ds, run, tasks=8, seed=5, kind="sqr")
    assert fused.task_accuracies == single.task_accuracies
    fused = evaluate(gp, lp, ds, run, tasks=8, seed=5, fusion=FusionConfig(alpha=1.0))
    single = evaluate_single_branch(lp, ds, run, tasks=8, seed=5, kind="kl")
    assert fused.task_accuracies == single.task_accuracies


def test_thread_count_does_not_change_results(setup, monkeypatch):
    ds, run, gp, lp = setup
    monkeypatch.setenv("STN_THREADS", "1")
    a = evaluate(gp, lp, ds, run, tasks=6)
    monkeypatch.setenv("STN_THREADS", "3")
    b = evaluate(gp, lp, ds, run, tasks=6)
    assert a.task_accuracies == b.task_accuracies
    monkeypatch.setenv("STN_THREADS", "-2")
    with pytest.raises(InvalidConfig):
        evaluate(gp, lp, ds, run, tasks=2)


def test_sweep_endpoints(setup):
    ds, run, gp, lp = setup
    res = dict(sweep_alpha(gp, lp, ds, run, [0.0, 0.5, 1.0], tasks=5, seed=2))
    assert res[0.0].task_accuracies == evaluate_single_branch(gp, ds, run, 5, 2, "sqr").task_accuracies
    assert res[1.0].task_accuracies == evaluate_single_branch(lp, ds, run, 5, 2, "kl").task_accuracies
    assert res[0.5].config["fusion"]["alpha"] == 0.5


def test_ablation_table_shape(setup):
    ds, run, gp, lp = setup
    rows = ablate_metrics(gp, lp, ds, run, ("sqr", "cos"), ("kl", "covar"), tasks=3)
    assert len(rows) == 2 + 2 + 4
    assert {(r["global_kind"], r["local_kind"]) for r in rows[4:]} == {
        ("sqr", "kl"), ("sqr", "covar"), ("cos", "kl"), ("cos", "covar")
    }
    assert all(0.0 <= r["report"].mean <= 1.0 for r in rows)


def test_adaptive_requires_params(setup):
    ds, run, gp, lp = setup
    with pytest.raises(InvalidConfig):
        evaluate(gp, lp, ds, run, tasks=1, fusion=FusionConfig(mode="adaptive"))


def test_report_config_echo(setup):
    ds, run, gp, lp = setup
    r = evaluate(gp, lp, ds, run, tasks=2, seed=11)
    assert r.config["seed"] == 11 and r.config["tasks"] == 2
    assert r.config["encoder"]["embed_dim"] == 16
    assert r.csv_rows(3, 1)[1] == (1, 3, 1, r.task_accuracies[1])
