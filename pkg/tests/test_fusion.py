import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stn import autodiff as ad
from stn.errors import InvalidConfig, LengthMismatch, NonFiniteInput
from stn.fusion import (
    AdaptiveFusionParams,
    FusionConfig,
    adaptive_similarity_tensor,
    classify,
    fuse_adaptive,
    fuse_manual,
    l2_normalize,
    update_running_stats,
)


def test_l2_normalize():
    np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8])
    np.testing.assert_array_equal(l2_normalize([0.0, 0.0]), [0.0, 0.0])
    np.testing.assert_allclose(np.linalg.norm(l2_normalize([[1.0, 1.0], [0.0, 5.0]]), axis=1), 1.0)


def test_alpha_endpoints_select_one_branch():
    d_kl, d_ed = np.array([1.0, 3.0, 2.0]), np.array([4.0, 0.5, 1.0])
    only_ed = fuse_manual(d_kl, d_ed, FusionConfig(alpha=0.0, normalize=False))
    only_kl = fuse_manual(d_kl, d_ed, FusionConfig(alpha=1.0, normalize=False))
    np.testing.assert_array_equal(only_ed, -d_ed)
    np.testing.assert_array_equal(only_kl, -d_kl)


def test_hand_value_and_tie():
    s = fuse_manual([1.0, 2.0, 2.0], [2.0, 1.0, 2.0], FusionConfig(alpha=0.5))
    np.testing.assert_allclose(s, [-0.5, -0.5, -2.0 / 3.0], rtol=1e-14)
    assert classify(s) == 0


def test_unnormalized_hand_value():
    s = fuse_manual([1.0, 4.0], [3.0, 0.0], FusionConfig(alpha=0.25, normalize=False))
    np.testing.assert_allclose(s, [-2.5, -1.0])
    assert classify(s) == 1


def test_row_wise_stack_matches_vectors():
    rng = np.random.default_rng(0)
    d_kl, d_ed = rng.uniform(size=(4, 5)), rng.uniform(size=(4, 5)) * 30
    cfg = FusionConfig(alpha=0.3)
    stacked = fuse_manual(d_kl, d_ed, cfg)
    for i in range(4):
        np.testing.assert_allclose(stacked[i], fuse_manual(d_kl[i], d_ed[i], cfg), rtol=1e-15)
    np.testing.assert_array_equal(classify(stacked), [classify(r) for r in stacked])


def test_config_validation():
    with pytest.raises(InvalidConfig):
        FusionConfig(alpha=1.5)
    with pytest.raises(InvalidConfig):
        FusionConfig(mode="learned")
    with pytest.raises(InvalidConfig):
        fuse_manual([1.0], [1.0], FusionConfig(mode="adaptive"))


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        fuse_manual([1.0, 2.0], [1.0, 2.0, 3.0], FusionConfig())


def test_classify_rejects_non_finite():
    with pytest.raises(NonFiniteInput):
        classify([1.0, np.nan])
    with pytest.raises(LengthMismatch):
        classify([])


def test_adaptive_hand_value():
    p = AdaptiveFusionParams(
        weight=np.array([2.0, 1.0]), running_mean=np.array([1.0, 10.0]), running_var=np.array([4.0, 25.0])
    )
    s = fuse_adaptive([3.0, 1.0], [10.0, 15.0], p)
    np.testing.assert_allclose(s, [-2.0, -1.0])


def test_adaptive_unit_stats_equal_unnormalized_manual():
    rng = np.random.default_rng(1)
    d_kl, d_ed = rng.uniform(size=6), rng.uniform(size=6)
    p = AdaptiveFusionParams(weight=np.array([0.7, 0.3]))
    np.testing.assert_allclose(
        fuse_adaptive(d_kl, d_ed, p), fuse_manual(d_kl, d_ed, FusionConfig(alpha=0.7, normalize=False)), rtol=1e-14
    )


def test_adaptive_weight_gradient():
    rng = np.random.default_rng(2)
    d_kl, d_ed = rng.uniform(size=(3, 4)) * 100, rng.uniform(size=(3, 4))
    w0 = np.array([0.4, 1.3])
    labels = np.array([0, 2, 3])

    def value(w):
        sim, _, _ = adaptive_similarity_tensor(d_kl, d_ed, ad.Tensor(w))
        return ad.cross_entropy_from_distances(-sim, labels).item()

    w = ad.parameter(w0.copy())
    sim, means, vars_ = adaptive_similarity_tensor(d_kl, d_ed, w)
    ad.cross_entropy_from_distances(-sim, labels).backward()
    h = 1e-6
    fd = [(value(w0 + h * e) - value(w0 - h * e)) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(w.grad, fd, rtol=1e-5)
    np.testing.assert_allclose(means, [d_kl.mean(), d_ed.mean()])
    np.testing.assert_allclose(vars_, [d_kl.var(), d_ed.var()], rtol=1e-9)


def test_running_stats_momentum():
    p = AdaptiveFusionParams()
    update_running_stats(p, np.array([10.0, 20.0]), np.array([3.0, 5.0]))
    np.testing.assert_allclose(p.running_mean, [1.0, 2.0])
    np.testing.assert_allclose(p.running_var, [1.2, 1.4])


dist = arrays(np.float64, (6,), elements=st.floats(0.01, 1e3, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(dist, dist, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(0.0, 1.0))
def test_normalized_fusion_is_scale_invariant(d_kl, d_ed, a, b, alpha):
    cfg = FusionConfig(alpha=alpha)
    np.testing.assert_allclose(fuse_manual(a * d_kl, b * d_ed, cfg), fuse_manual(d_kl, d_ed, cfg), rtol=1e-9, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(dist, dist, st.floats(0.0, 1.0), st.booleans())
def test_fusion_is_affine_in_alpha(d_kl, d_ed, alpha, normalize):
    lo = fuse_manual(d_kl, d_ed, FusionConfig(alpha=0.0, normalize=normalize))
    hi = fuse_manual(d_kl, d_ed, FusionConfig(alpha=1.0, normalize=normalize))
    mid = fuse_manual(d_kl, d_ed, FusionConfig(alpha=alpha, normalize=normalize))
    np.testing.assert_allclose(mid, (1 - alpha) * lo + alpha * hi, rtol=1e-9, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(dist, dist)
def test_label_changes_bounded_over_alpha_sweep(d_kl, d_ed):
    # the argmax of an affine family in alpha changes at most N - 1 times
    labels = [int(classify(fuse_manual(d_kl, d_ed, FusionConfig(alpha=a)))) for a in np.linspace(0, 1, 201)]
    changes = sum(x != y for x, y in zip(labels, labels[1:]))
    assert changes <= len(d_kl) - 1


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_classify_lowest_index_on_ties(s):
    idx = classify(s)
    assert s[idx] == s.max()
    assert np.all(s[:idx] < s.max())
