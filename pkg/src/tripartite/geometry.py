"""Compactness / separability metrics and simplex-ETF diagnostics.

All metrics are cosine based and reported in percent. Classes for which a
metric is undefined (too few samples, every pair degenerate) get ``nan``
rather than 0, and means/stds are taken over the defined classes only.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .losses import Classifier

log = logging.getLogger(__name__)


def _weights(clf):
    if isinstance(clf, Classifier):
        return clf.weights
    return np.asarray(clf, dtype=np.float64)


def _nan_stats(v):
    v = np.asarray(v, dtype=np.float64)
    ok = v[~np.isnan(v)]
    if ok.size == 0:
        return float("nan"), float("nan")
    return float(ok.mean()), float(ok.std())


def _unit_rows(V):
    norms = np.linalg.norm(V, axis=1)
    ok = norms > 0
    U = np.zeros_like(V)
    U[ok] = V[ok] / norms[ok, None]
    return U, ok


def _infer_K(labels, K):
    if K is None:
        return int(labels.max()) + 1 if labels.size else 0
    return int(K)


def intra_class_compactness(X, labels, K=None):
    """Per class: mean over ordered pairs ``i != i'`` of ``(cos + 1) / 2``, times 100.

    Returns ``(values, skipped_pairs)``. Classes with fewer than two usable
    (nonzero) features are ``nan``; pairs involving a zero feature are skipped.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    K = _infer_K(labels, K)
    out = np.full(K, np.nan)
    skipped = 0
    for k in range(K):
        Xk = X[labels == k]
        n = Xk.shape[0]
        U, ok = _unit_rows(Xk)
        m = int(ok.sum())
        skipped += n * (n - 1) - m * (m - 1)
        if m < 2:
            continue
        s = U[ok].sum(axis=0)
        # sum over i != i' of u_i . u_i' = |sum u|^2 - m
        pair_sum = s @ s - m
        out[k] = (pair_sum / (m * m - m) + 1.0) / 2.0 * 100.0
    return out, skipped


def inter_class_feature_separability(X, labels, K=None):
    """Per class ``k``: mean of ``(1 - cos(x_i - mean_k, mean_j)) / 2`` over samples ``i`` of ``k``
    and classes ``j != k``, times 100.

    Samples are centered by their own class mean; the other-class means are
    used as is (not centered). Pairs with a zero vector on either side are
    skipped and counted. Returns ``(values, skipped_pairs)``.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    K = _infer_K(labels, K)
    if K < 2:
        raise ConfigError("feature separability needs K >= 2")
    counts = np.bincount(labels, minlength=K)
    means = np.zeros((K, X.shape[1]))
    present = counts > 0
    for k in np.flatnonzero(present):
        means[k] = X[labels == k].mean(axis=0)
    Mu, mok = _unit_rows(means)
    mok &= present
    mean_sum = Mu[mok].sum(axis=0)

    out = np.full(K, np.nan)
    skipped = 0
    for k in range(K):
        n = int(counts[k])
        if n == 0:
            continue
        U, ok = _unit_rows(X[labels == k] - means[k])
        m = int(ok.sum())
        targets = int(mok.sum()) - int(mok[k])
        target_sum = mean_sum - Mu[k] if mok[k] else mean_sum
        skipped += n * (K - 1) - m * targets
        pairs = m * targets
        if pairs == 0:
            continue
        dot = U[ok].sum(axis=0) @ target_sum
        out[k] = (pairs - dot) / (2.0 * pairs) * 100.0
    if skipped:
        log.info("feature separability: skipped %d zero-vector pairs", skipped)
    return out, skipped


@dataclass
class SeparabilityMatrix:
    """``s[j, k] = (1 - cos(w_j - w_bar, w_k - w_bar)) / 2`` off the diagonal, 1 on it."""

    s: np.ndarray

    @property
    def K(self):
        return self.s.shape[0]

    def row_means(self):
        """Off-diagonal row means rescaled to percent."""
        off = np.where(np.eye(self.K, dtype=bool), 0.0, self.s).sum(axis=1)
        return off / (self.K - 1) * 100.0


def separability_matrix(clf):
    W = _weights(clf)
    K = W.shape[0]
    if K < 2:
        raise ConfigError("classifier separability needs K >= 2")
    C = W - W.mean(axis=0)
    U, ok = _unit_rows(C)
    if not ok.all():
        raise ConfigError(
            "centered classifier vector is zero (all weights identical); separability undefined"
        )
    S = np.triu((1.0 - U @ U.T) / 2.0, 1)
    S = S + S.T
    np.fill_diagonal(S, 1.0)
    return SeparabilityMatrix(S)


def classifier_separability(clf):
    """Per class: mean over ``j != k`` of ``(1 - cos(w_k - w_bar, w_j - w_bar)) / 2``, times 100."""
    return separability_matrix(clf).row_means()


@dataclass
class MetricReport:
    compactness: np.ndarray
    feature_separability: np.ndarray
    classifier_separability: np.ndarray
    skipped_pairs: dict = field(default_factory=dict)

    @property
    def K(self):
        return self.classifier_separability.shape[0]

    def stats(self):
        """``{metric: (mean, std)}`` over the classes where the metric is defined."""
        return {
            "compactness": _nan_stats(self.compactness),
            "feat_sep": _nan_stats(self.feature_separability),
            "clf_sep": _nan_stats(self.classifier_separability),
        }

    def summary_line(self):
        parts = []
        for name, (mean, std) in self.stats().items():
            parts.append(f"{name} {mean:.3f} ± {std:.3f}")
        return "  ".join(parts)


def metric_report(X, labels, clf, K=None):
    """All three per-class metrics. ``X`` may be empty (feature metrics then ``nan``)."""
    W = _weights(clf)
    K = W.shape[0] if K is None else K
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size:
        com, s1 = intra_class_compactness(X, labels, K)
        sep, s2 = inter_class_feature_separability(X, labels, K)
    else:
        com, sep, s1, s2 = np.full(K, np.nan), np.full(K, np.nan), 0, 0
    return MetricReport(
        compactness=com,
        feature_separability=sep,
        classifier_separability=classifier_separability(W),
        skipped_pairs={"compactness": s1, "feat_sep": s2},
    )


@dataclass
class EtfReport:
    target_cos: float
    max_pairwise_cos_deviation: float
    max_norm_deviation: float


def etf_deviation(clf):
    """Distance of the centered classifier from a simplex ETF.

    Reports ``max |cos(w_k - w_bar, w_j - w_bar) + 1/(K-1)|`` over pairs and the
    largest relative mismatch between the (uncentered) vector norms.
    """
    W = _weights(clf)
    K, d = W.shape
    if K < 2:
        raise ConfigError("ETF needs K >= 2")
    if K > d + 1:
        warnings.warn(f"K={K} vectors cannot form a simplex ETF in d={d} (needs d >= K-1)",
                      stacklevel=2)
    target = -1.0 / (K - 1)
    U, ok = _unit_rows(W - W.mean(axis=0))
    if not ok.all():
        cos_dev = float("inf")
    else:
        C = U @ U.T
        iu = np.triu_indices(K, 1)
        cos_dev = float(np.max(np.abs(C[iu] - target)))
    norms = np.linalg.norm(W, axis=1)
    norm_dev = float((norms.max() - norms.min()) / norms.max()) if norms.max() > 0 else 0.0
    return EtfReport(target, cos_dev, norm_dev)


def max_pairwise_cos_deviation(W):
    """``max_{k<j} |cos(w_k, w_j) + 1/(K-1)|`` on the raw (uncentered) vectors."""
    W = _weights(W)
    K = W.shape[0]
    U, _ = _unit_rows(W)
    iu = np.triu_indices(K, 1)
    return float(np.max(np.abs((U @ U.T)[iu] + 1.0 / (K - 1))))


def construct_etf(K, d, rng):
    """``K`` unit vectors in ``R^d`` with all pairwise inner products ``-1/(K-1)``.

    Built from an orthonormal basis of the rows of the centering matrix
    ``I - J/K`` and embedded in ``R^d`` by a random orthonormal map.
    """
    if K < 2:
        raise ConfigError("ETF needs K >= 2")
    if d < K - 1:
        raise ConfigError(f"simplex ETF of {K} vectors needs d >= {K - 1}, got d={d}")
    center = np.eye(K) - 1.0 / K
    _, vecs = np.linalg.eigh(center)
    # eigenvalue 0 (the all-ones direction) sorts first; the rest are 1
    coords = vecs[:, 1:] * np.sqrt(K / (K - 1.0))
    Q, R = np.linalg.qr(rng.normal(size=(d, K - 1)))
    Q = Q * np.sign(np.diag(R))
    W = coords @ Q.T
    return W / np.linalg.norm(W, axis=1, keepdims=True)
