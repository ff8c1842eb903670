import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

import metrics_oracle as oracle
from tripartite.errors import ConfigError
from tripartite.geometry import (
    classifier_separability,
    construct_etf,
    etf_deviation,
    inter_class_feature_separability,
    intra_class_compactness,
    max_pairwise_cos_deviation,
    metric_report,
    separability_matrix,
)
from tripartite.losses import Classifier, Normalization


def instance(seed, K=5, n=50, d=8):
    rng = np.random.default_rng(seed)
    y = np.concatenate([np.arange(K), rng.integers(K, size=n - K)])
    X = rng.normal(size=(n, d)) + 0.8 * rng.normal(size=(K, d))[y]
    W = rng.normal(size=(K, d))
    return X, y, W


def random_rotation(d, rng):
    Q, R = np.linalg.qr(rng.normal(size=(d, d)))
    return Q * np.sign(np.diag(R))


# -- compactness -----------------------------------------------------------------


def test_compactness_identical_and_antipodal():
    X = np.array([[1.0, 2.0], [1.0, 2.0], [1.0, 2.0], [3.0, 0.0], [-3.0, 0.0]])
    y = np.array([0, 0, 0, 1, 1])
    vals, skipped = intra_class_compactness(X, y)
    assert_allclose(vals, [100.0, 0.0], atol=1e-12)
    assert skipped == 0


def test_compactness_seed42_matches_scalar_loop():
    X, y, _ = instance(42, K=1, n=50, d=8)
    vals, _ = intra_class_compactness(X, y)
    assert_allclose(vals, oracle.compactness(X, y, 1), rtol=1e-12)


def test_compactness_small_class_is_absent():
    X = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]])
    vals, _ = intra_class_compactness(X, np.array([0, 0, 1]), K=3)
    assert not np.isnan(vals[0])
    assert np.isnan(vals[1]) and np.isnan(vals[2])


def test_compactness_skips_zero_features():
    X = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    vals, skipped = intra_class_compactness(X, np.zeros(3, dtype=int))
    assert skipped == 4
    assert_allclose(vals, oracle.compactness(X, [0, 0, 0], 1), rtol=1e-12)


# -- feature separability ------------------------------------------------------------


def test_feature_separability_half_antipodal_half_parallel():
    # centred samples sum to zero, so a class cannot be entirely antipodal (or
    # parallel) to another mean; +-v along mean_1 gives one 100 and one 0 term
    X = np.array([[1.0, 0.0], [-1.0, 0.0], [5.0, 0.0], [5.0, 0.0]])
    y = np.array([0, 0, 1, 1])
    vals, skipped = inter_class_feature_separability(X, y)
    assert_allclose(vals[0], 50.0, rtol=1e-15)
    # class 1 has no spread: both of its pairs are skipped and the value is absent
    assert np.isnan(vals[1]) and skipped == 2


def test_feature_separability_per_pair_terms():
    X = np.array([[-1.0, 0.0], [-1.0, 0.0], [3.0, 0.0], [1.0, 0.0], [1.0, 0.0], [7.0, 0.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    # class 0: centred samples (-2, -2, +2) against mean_1 = (3, 0)
    vals, _ = inter_class_feature_separability(X, y)
    assert_allclose(vals[0], (100 + 100 + 0) / 3, rtol=1e-14)
    with pytest.raises(ConfigError):
        inter_class_feature_separability(X[:1], y[:1])


def test_feature_separability_seed42_matches_scalar_loop():
    X, y, _ = instance(42)
    vals, _ = inter_class_feature_separability(X, y)
    assert_allclose(vals, oracle.feature_separability(X, y, 5), rtol=1e-12)


def test_feature_separability_uses_uncentred_other_means():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(12, 3)) + 5.0
    y = np.repeat([0, 1, 2], 4)
    vals, _ = inter_class_feature_separability(X, y)
    # with a common offset the uncentred means all point along (1, 1, 1)
    assert_allclose(vals, oracle.feature_separability(X, y, 3), rtol=1e-12)


# -- classifier separability -------------------------------------------------------


def test_classifier_separability_two_classes_is_100():
    rng = np.random.default_rng(0)
    for _ in range(10):
        W = rng.normal(size=(2, 4))
        assert_allclose(classifier_separability(W), [100.0, 100.0], rtol=1e-14)
        S = separability_matrix(W).s
        assert_allclose(S[0, 1], 1.0, rtol=1e-14)


def test_classifier_separability_etf_k100():
    W = construct_etf(100, 128, np.random.default_rng(1))
    sep = classifier_separability(W)
    assert_allclose(sep, 5000 / 99, rtol=1e-12)
    assert sep.std() < 1e-10
    assert abs(sep.mean() - 50.50) < 0.01


def test_classifier_separability_seed42_matches_scalar_loop():
    _, _, W = instance(42)
    assert_allclose(classifier_separability(W), oracle.classifier_separability(W), rtol=1e-12)


def test_classifier_separability_identical_weights_error():
    with pytest.raises(ConfigError):
        classifier_separability(np.ones((3, 2)))
    with pytest.raises(ConfigError):
        classifier_separability(np.ones((1, 2)))


def test_classifier_separability_accepts_classifier_object():
    _, _, W = instance(1)
    clf = Classifier(W, None, Normalization.CLASSIFIER)
    np.testing.assert_array_equal(classifier_separability(clf), classifier_separability(W))


# -- separability matrix ---------------------------------------------------------------


def test_separability_matrix_etf_k4():
    W = construct_etf(4, 3, np.random.default_rng(0))
    S = separability_matrix(W).s
    off = S[~np.eye(4, dtype=bool)]
    assert_allclose(off, 2 / 3, rtol=1e-12)
    np.testing.assert_array_equal(np.diag(S), 1.0)


@given(st.integers(0, 2**32 - 1), st.integers(2, 12))
def test_separability_matrix_symmetric_and_row_means(seed, K):
    W = np.random.default_rng(seed).normal(size=(K, 5))
    m = separability_matrix(W)
    np.testing.assert_array_equal(m.s, m.s.T)
    np.testing.assert_array_equal(np.diag(m.s), 1.0)
    assert np.all((m.s >= 0) & (m.s <= 1))
    np.testing.assert_array_equal(m.row_means(), classifier_separability(W))
    assert_allclose(m.s, oracle.separability_matrix(W), rtol=1e-12, atol=1e-15)


# -- invariances -----------------------------------------------------------------------


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_metrics_rotation_and_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    X, y, W = instance(seed % 1000, K=4, n=30, d=5)
    Q = random_rotation(5, rng)
    a = metric_report(X, y, W)
    b = metric_report(scale * X @ Q.T, y, W @ Q.T)
    c = metric_report(X, y, scale * W)
    for name in ("compactness", "feature_separability", "classifier_separability"):
        assert_allclose(getattr(b, name), getattr(a, name), rtol=1e-10)
        assert_allclose(getattr(c, name), getattr(a, name), rtol=1e-10)


@given(st.integers(0, 2**32 - 1))
def test_metrics_in_range(seed):
    X, y, W = instance(seed % 5000, K=6, n=40, d=4)
    rep = metric_report(X, y, W)
    for v in (rep.compactness, rep.feature_separability, rep.classifier_separability):
        ok = v[~np.isnan(v)]
        assert np.all((ok >= 0) & (ok <= 100))
    for mean, std in rep.stats().values():
        assert std >= 0


def test_metric_report_without_features():
    W = np.random.default_rng(3).normal(size=(4, 3))
    rep = metric_report(np.zeros((0, 3)), [], W)
    assert np.isnan(rep.compactness).all()
    assert np.isnan(rep.stats()["compactness"][0])
    assert not np.isnan(rep.classifier_separability).any()
    assert "clf_sep" in rep.summary_line()


# -- ETF ---------------------------------------------------------------------------------


@pytest.mark.parametrize("K,d", [(4, 3), (10, 16), (100, 128)])
def test_construct_etf_self_consistent(K, d):
    W = construct_etf(K, d, np.random.default_rng(K))
    assert W.shape == (K, d)
    rep = etf_deviation(W)
    assert rep.max_pairwise_cos_deviation < 1e-12
    assert rep.max_norm_deviation < 1e-12
    G = W @ W.T
    assert_allclose(G[~np.eye(K, dtype=bool)], -1 / (K - 1), atol=1e-12)
    assert_allclose(np.diag(G), 1.0, rtol=1e-14)


def test_construct_etf_small_cases():
    W = construct_etf(2, 1, np.random.default_rng(0))
    assert_allclose(np.sort(W[:, 0]), [-1.0, 1.0], rtol=1e-15)
    W = construct_etf(3, 2, np.random.default_rng(0))
    ang = np.degrees(np.arccos(np.clip(W @ W.T, -1, 1)))
    assert_allclose(ang[~np.eye(3, dtype=bool)], 120.0, rtol=1e-10)


def test_construct_etf_random_orientation_and_errors():
    a = construct_etf(5, 6, np.random.default_rng(0))
    b = construct_etf(5, 6, np.random.default_rng(1))
    assert not np.allclose(a, b)
    with pytest.raises(ConfigError):
        construct_etf(5, 3, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        construct_etf(1, 3, np.random.default_rng(0))


def test_etf_deviation_orthonormal():
    K = 4
    W = np.eye(K)
    rep = etf_deviation(W)
    C = W - W.mean(axis=0)
    U = C / np.linalg.norm(C, axis=1, keepdims=True)
    want = max(abs(U[i] @ U[j] + 1 / (K - 1)) for i in range(K) for j in range(i + 1, K))
    assert_allclose(rep.max_pairwise_cos_deviation, want, atol=1e-15)
    assert rep.target_cos == -1 / 3
    # centering an orthonormal set already gives the simplex
    assert rep.max_pairwise_cos_deviation < 1e-12
    W = np.eye(4)[:3] * np.array([[1.0], [2.0], [1.0]])
    rep = etf_deviation(W)
    assert rep.max_pairwise_cos_deviation > 0.01
    assert_allclose(rep.max_norm_deviation, 0.5)


def test_etf_deviation_antipodal_pair():
    rep = etf_deviation(np.array([[0.0, 2.0], [0.0, -2.0]]))
    assert rep.target_cos == -1.0
    assert rep.max_pairwise_cos_deviation == 0.0
    assert rep.max_norm_deviation == 0.0


def test_etf_deviation_warns_when_infeasible():
    with pytest.warns(UserWarning):
        etf_deviation(np.random.default_rng(0).normal(size=(5, 2)))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        etf_deviation(construct_etf(4, 3, np.random.default_rng(0)))


def test_max_pairwise_cos_deviation_raw():
    W = construct_etf(4, 8, np.random.default_rng(0))
    assert max_pairwise_cos_deviation(W) < 1e-12
    assert_allclose(max_pairwise_cos_deviation(np.eye(4)), 1 / 3, rtol=1e-15)
    assert math.isclose(max_pairwise_cos_deviation(np.eye(2)), 1.0)
