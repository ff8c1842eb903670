"""Forward evaluation of the joint, contrastive and uniform losses (BCE and CE families).

Per-sample functions (``bce_joint``, ``ce_contrastive`` ...) mirror the
textbook formulas and are what the tests compare against direct-formula
oracles. The ``*_rows`` helpers evaluate a whole batch through the fused
kernels and also return the gradient with respect to the score matrix; the
gradient and training modules build on them.
"""

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import kernels
from .bank import MemoryBank
from .errors import ConfigError, SlotUninitialized

softplus = kernels.softplus
sigmoid = kernels.sigmoid

_UNIT_RTOL = 1e-12


class Family(str, Enum):
    BCE = "bce"
    CE = "ce"


# The activation used in a gradient (sigmoid for BCE, softmax for CE) is
# determined by the family alone.
ActivationKind = Family


class Normalization(str, Enum):
    NONE = "none"
    FEATURE = "feature"
    CLASSIFIER = "classifier"
    BOTH = "both"

    @property
    def normalizes_features(self):
        return self in (Normalization.FEATURE, Normalization.BOTH)

    @property
    def normalizes_classifier(self):
        return self in (Normalization.CLASSIFIER, Normalization.BOTH)


@dataclass(frozen=True)
class LossConfig:
    """Loss weights and hyperparameters.

    ``ss_family`` / ``cc_family`` override ``family`` for the contrastive and
    uniform terms, which is how mixed rows of an ablation grid (e.g. CE joint
    learning with BCE contrastive learning) are expressed.
    """

    family: Family = Family.BCE
    lambda_ss: float = 0.0
    lambda_cc: float = 0.0
    tau: float = 0.1
    r: float = 1.0
    beta: float = 0.9999
    include_cc_positive: bool = False
    normalization: Normalization = Normalization.CLASSIFIER
    ss_family: Family | None = None
    cc_family: Family | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "family", Family(self.family))
            object.__setattr__(self, "normalization", Normalization(self.normalization))
            for name in ("ss_family", "cc_family"):
                value = getattr(self, name)
                if value is not None:
                    object.__setattr__(self, name, Family(value))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not 0 < self.r <= 1:
            raise ConfigError(f"r must be in (0, 1], got {self.r}")
        if not self.lambda_ss >= 0:
            raise ConfigError(f"lambda_ss must be >= 0, got {self.lambda_ss}")
        if not self.lambda_cc >= 0:
            raise ConfigError(f"lambda_cc must be >= 0, got {self.lambda_cc}")
        if not 0 <= self.beta < 1:
            raise ConfigError(f"beta must be in [0, 1), got {self.beta}")
        if self.lambda_cc > 0 and not self.normalization.normalizes_classifier:
            raise ConfigError(
                "uniform learning (lambda_cc > 0) needs unit classifier vectors; "
                "use normalization 'classifier' or 'both'"
            )

    @property
    def contrastive_family(self):
        return self.ss_family or self.family

    @property
    def uniform_family(self):
        return self.cc_family or self.family


@dataclass
class Classifier:
    """Linear classifier ``logits_j = w_j . x + b_j`` with a normalization mode.

    The mode decides which side is L2-normalized before the inner product.
    Biases are never normalized.
    """

    weights: np.ndarray
    biases: np.ndarray = None
    normalization: Normalization = Normalization.NONE

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        if self.weights.ndim != 2 or self.weights.shape[0] < 1 or self.weights.shape[1] < 1:
            raise ConfigError(f"weights must be a non-empty K x d matrix, got {self.weights.shape}")
        if self.biases is None:
            self.biases = np.zeros(self.K)
        self.biases = np.array(self.biases, dtype=np.float64).reshape(-1)
        if self.biases.shape != (self.K,):
            raise ConfigError(f"expected {self.K} biases, got {self.biases.shape}")
        self.normalization = Normalization(self.normalization)

    @property
    def K(self):
        return self.weights.shape[0]

    @property
    def d(self):
        return self.weights.shape[1]

    def copy(self):
        return Classifier(self.weights.copy(), self.biases.copy(), self.normalization)

    def effective_weights(self):
        if not self.normalization.normalizes_classifier:
            return self.weights
        norms = np.linalg.norm(self.weights, axis=1)
        if np.any(norms == 0):
            raise ConfigError("zero classifier vector cannot be normalized")
        return self.weights / norms[:, None]

    def effective_features(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.d:
            raise ConfigError(f"feature dim {X.shape[-1]} != classifier dim {self.d}")
        if not self.normalization.normalizes_features:
            return X
        norms = np.linalg.norm(X, axis=-1, keepdims=True)
        if np.any(norms == 0):
            raise ConfigError("zero feature cannot be normalized")
        return X / norms

    def logits(self, X):
        return self.effective_features(X) @ self.effective_weights().T + self.biases

    def predict(self, X):
        # np.argmax returns the lowest index among ties
        return np.argmax(self.logits(np.atleast_2d(X)), axis=1)


class LabeledFeature:
    """A feature vector together with its class index."""

    __slots__ = ("x", "label")

    def __init__(self, x, label):
        self.x = np.asarray(x, dtype=np.float64)
        self.label = int(label)
        if not np.all(np.isfinite(self.x)):
            raise ValueError("feature contains non-finite entries")
        if self.label < 0:
            raise ValueError(f"invalid label {label}")

    def __iter__(self):
        yield self.x
        yield self.label

    def __repr__(self):
        return f"LabeledFeature(label={self.label}, dim={self.x.shape[0]})"


# -- batch kernels -----------------------------------------------------------


def joint_rows(logits, labels, family, keep=None, weights=None):
    """Per-sample joint loss and ``d loss / d logits`` for a batch."""
    if Family(family) is Family.BCE:
        return kernels.bce_rows(logits, labels, keep, weights, include_positive=True)
    return kernels.ce_rows(logits, labels, None, weights)


def contrastive_scores(Z, bank):
    """Cosines between (normalized) rows of ``Z`` and every bank slot."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if Z.shape[1] != bank.dim:
        raise ConfigError(f"projection dim {Z.shape[1]} != bank dim {bank.dim}")
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero projection has no direction")
    Zn = Z / norms
    return Zn @ bank.slots.T, Zn, norms[:, 0]


def contrastive_rows(Z, labels, bank, tau, family, weights=None):
    """Per-sample contrastive loss and ``d loss / d cos`` (already divided by tau).

    Uninitialized slots are excluded; rows whose own slot is uninitialized
    contribute zero. Returns ``(loss, dcos, Zn, norms, active)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    cos, Zn, norms = contrastive_scores(Z, bank)
    active = bank.initialized[labels]
    row_labels = np.where(active, labels, -1)
    keep = np.broadcast_to(bank.initialized, cos.shape)
    S = cos / tau
    if Family(family) is Family.BCE:
        loss, dS = kernels.bce_rows(S, row_labels, keep, weights, include_positive=True)
    else:
        loss, dS = kernels.ce_rows(S, row_labels, keep, weights)
    return loss, dS / tau, Zn, norms, active


def uniform_rows(W, family, include_positive=False, weights=None):
    """Per-class uniform loss on the rows of ``W`` and ``d loss / d (W W^T)``."""
    W = np.asarray(W, dtype=np.float64)
    U = W @ W.T
    labels = np.arange(W.shape[0])
    if Family(family) is Family.BCE:
        return kernels.bce_rows(U, labels, None, weights, include_positive=include_positive)
    return kernels.ce_rows(U, labels, None, weights)


# -- per-sample losses ---------------------------------------------------------


def _single_logits(x, label, clf):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != clf.d:
        raise ConfigError(f"feature dim {x.shape[0]} != classifier dim {clf.d}")
    if not 0 <= label < clf.K:
        raise ConfigError(f"label {label} outside [0, {clf.K})")
    return clf.logits(x[None, :])


def ce_joint(x, label, clf):
    """Softmax cross-entropy of one sample, via the log-sum-exp form."""
    loss, _ = kernels.ce_rows(_single_logits(x, label, clf), [label])
    return float(loss[0])


def bce_joint(x, label, clf, keep=None):
    """``softplus(-logit_k) + sum_{j != k, keep[j]} softplus(logit_j)``."""
    S = _single_logits(x, label, clf)
    if keep is not None:
        keep = np.asarray(keep, dtype=bool).reshape(1, -1)
        if keep.shape[1] != clf.K:
            raise ConfigError(f"mask length {keep.shape[1]} != K={clf.K}")
    loss, _ = kernels.bce_rows(S, [label], keep)
    return float(loss[0])


def draw_negative_mask(k, K, r, rng):
    """One Bernoulli(r) draw per class: ``keep[j] = p_j < r`` with ``p_j ~ U(0, 1)``.

    ``keep[k]`` is set True but never read. For ``r == 1`` no random numbers
    are consumed.
    """
    if not 0 < r <= 1:
        raise ConfigError(f"r must be in (0, 1], got {r}")
    if r >= 1:
        return np.ones(K, dtype=bool)
    keep = rng.random(K) < r
    keep[k] = True
    return keep


def draw_negative_masks(labels, K, r, rng):
    """Row-stacked :func:`draw_negative_mask` for a batch (same random stream)."""
    labels = np.asarray(labels, dtype=np.int64)
    if not 0 < r <= 1:
        raise ConfigError(f"r must be in (0, 1], got {r}")
    if r >= 1:
        return np.ones((labels.size, K), dtype=bool)
    keep = rng.random((labels.size, K)) < r
    keep[np.arange(labels.size), labels] = True
    return keep


def _own_slot(label, bank):
    if not 0 <= label < bank.K:
        raise ConfigError(f"label {label} outside bank of {bank.K} slots")
    if not bank.initialized[label]:
        raise SlotUninitialized(f"memory-bank slot {label} not initialized")


def ce_contrastive(z, label, bank, tau):
    """Softmax contrastive loss of one projection against the initialized bank slots."""
    _own_slot(label, bank)
    loss, *_ = contrastive_rows(np.reshape(z, (1, -1)), [label], bank, tau, Family.CE)
    return float(loss[0])


def bce_contrastive(z, label, bank, tau):
    """Sigmoid contrastive loss of one projection against the initialized bank slots."""
    _own_slot(label, bank)
    loss, *_ = contrastive_rows(np.reshape(z, (1, -1)), [label], bank, tau, Family.BCE)
    return float(loss[0])


def uniform_weights(clf):
    """Effective classifier vectors, which uniform learning requires to be unit-norm."""
    W = clf.effective_weights()
    norms = np.linalg.norm(W, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ConfigError(
            "uniform learning needs unit classifier vectors; normalize the classifier "
            "or use a normalizing mode"
        )
    return W


def bce_uniform(clf, k, include_positive=False):
    """``[softplus(-w_k.w_k)] + sum_{j != k} softplus(w_k . w_j)`` on unit vectors."""
    W = uniform_weights(clf)
    loss, _ = kernels.bce_rows((W[k] @ W.T)[None, :], [k], None, None, include_positive)
    return float(loss[0])


def ce_uniform(clf, k):
    """``-log(exp(w_k.w_k) / sum_j exp(w_k.w_j))`` on unit vectors."""
    W = uniform_weights(clf)
    loss, _ = kernels.ce_rows((W[k] @ W.T)[None, :], [k])
    return float(loss[0])


def cb_weight(n, beta):
    """Class-balanced weight ``(1 - beta) / (1 - beta**n)``; 1 when ``beta == 0``."""
    n = np.asarray(n)
    if np.any(n < 1):
        raise ValueError("class counts must be >= 1")
    if not 0 <= beta < 1:
        raise ValueError(f"beta must be in [0, 1), got {beta}")
    # -expm1(n log beta) = 1 - beta**n without cancellation for beta near 1
    if beta == 0:
        out = np.ones(n.shape)
    else:
        out = -math.expm1(math.log(beta)) / -np.expm1(n * math.log(beta))
    return float(out) if out.ndim == 0 else out


# -- tripartite combination ---------------------------------------------------


@dataclass
class LossBreakdown:
    """Weighted loss contributions; ``total = sc + ss + cc``."""

    sc: float
    ss: float = 0.0
    cc: float = 0.0
    skipped: int = 0
    extras: dict = field(default_factory=dict, repr=False)

    @property
    def total(self):
        return self.sc + self.ss + self.cc

    def __float__(self):
        return self.total


def tripartite_loss(X, labels, Z, clf, bank, cfg, rng=None, keep=None):
    """Batch loss ``mean(joint) + lambda_ss mean(contrastive) + lambda_cc/K sum(uniform)``.

    ``X`` are raw features (normalized here according to ``clf.normalization``),
    ``Z`` the projections aligned with ``X``. Negative masks are drawn from
    ``rng`` when the joint family is BCE and ``cfg.r < 1``, unless ``keep`` is
    given explicitly. Samples whose bank slot is uninitialized add zero to the
    contrastive sum and are counted in ``skipped``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B = labels.size
    if B == 0:
        raise ValueError("empty batch")
    if X.shape[0] != B:
        raise ConfigError(f"{X.shape[0]} features for {B} labels")

    if cfg.family is Family.BCE and keep is None and cfg.r < 1:
        if rng is None:
            raise ValueError("rng required to draw negative masks when r < 1")
        keep = draw_negative_masks(labels, clf.K, cfg.r, rng)
    if cfg.family is Family.CE:
        keep = None

    rows, _ = joint_rows(clf.logits(X), labels, cfg.family, keep, np.full(B, 1.0 / B))
    sc = math.fsum(rows)

    ss = 0.0
    skipped = 0
    if cfg.lambda_ss > 0:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[0] != B:
            raise ConfigError(f"{Z.shape[0]} projections for {B} labels")
        rows, _, _, _, active = contrastive_rows(
            Z, labels, bank, cfg.tau, cfg.contrastive_family, np.full(B, cfg.lambda_ss / B)
        )
        ss = math.fsum(rows)
        skipped = int(B - active.sum())

    cc = 0.0
    if cfg.lambda_cc > 0:
        K = clf.K
        rows, _ = uniform_rows(
            uniform_weights(clf), cfg.uniform_family, cfg.include_cc_positive,
            np.full(K, cfg.lambda_cc / K),
        )
        cc = math.fsum(rows)

    return LossBreakdown(sc=sc, ss=ss, cc=cc, skipped=skipped)


__all__ = [
    "ActivationKind", "Classifier", "Family", "LabeledFeature", "LossBreakdown", "LossConfig",
    "MemoryBank", "Normalization", "bce_contrastive", "bce_joint", "bce_uniform", "cb_weight",
    "ce_contrastive", "ce_joint", "ce_uniform", "contrastive_rows", "contrastive_scores",
    "draw_negative_mask", "draw_negative_masks", "joint_rows", "sigmoid", "softplus",
    "tripartite_loss", "uniform_rows", "uniform_weights",
]
