"""Analytic gradients of every loss term, plus a central-difference checker.

All gradients are exact derivatives of the forward functions in
:mod:`tripartite.losses`, including the chain rule through whatever
normalization the classifier mode applies. Memory-bank slots are constants.
"""

from dataclasses import dataclass

import numpy as np

from . import reference as ref
from .bank import MemoryBank
from .errors import ConfigError, SlotUninitialized
from .losses import (
    Classifier,
    Family,
    Normalization,
    cb_weight,
    contrastive_rows,
    joint_rows,
    uniform_rows,
    uniform_weights,
)


def normalization_backward(G, V):
    """Pull ``d/d(v/|v|)`` back to ``d/dv`` row-wise: ``(G - (G.u)u) / |v|``."""
    V = np.atleast_2d(V)
    G = np.atleast_2d(G)
    norms = np.linalg.norm(V, axis=1, keepdims=True)
    U = V / norms
    return (G - np.sum(G * U, axis=1, keepdims=True) * U) / norms


def tangent_project(W, G):
    """Remove from each row of ``G`` its component along the matching row of ``W``."""
    W = np.atleast_2d(W)
    U = W / np.linalg.norm(W, axis=1, keepdims=True)
    return G - np.sum(G * U, axis=1, keepdims=True) * U


def grad_joint_wrt_feature(x, label, clf, keep=None, family=Family.BCE):
    """Gradient of the joint loss of one sample with respect to its raw feature."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != clf.d:
        raise ConfigError(f"feature dim {x.shape[0]} != classifier dim {clf.d}")
    if keep is not None:
        keep = np.asarray(keep, dtype=bool).reshape(1, -1)
    _, dS = joint_rows(clf.logits(x[None, :]), [label], family, keep)
    dx = dS @ clf.effective_weights()
    if clf.normalization.normalizes_features:
        dx = normalization_backward(dx, x[None, :])
    return dx[0]


def grad_joint_wrt_classifier(X, labels, clf, keep=None, family=Family.BCE, sample_weights=None):
    """Gradient of the batch-mean joint loss w.r.t. the raw weights and the biases.

    ``sample_weights`` multiplies each sample's loss before averaging (the
    class-balanced fine-tuning objective). Returns ``(dW, db)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B = labels.size
    if B == 0:
        raise ValueError("empty batch")
    w = np.full(B, 1.0 / B)
    if sample_weights is not None:
        w = w * np.asarray(sample_weights, dtype=np.float64)
    if Family(family) is Family.CE:
        keep = None
    Xe = clf.effective_features(X)
    _, dS = joint_rows(Xe @ clf.effective_weights().T + clf.biases, labels, family, keep, w)
    dW = dS.T @ Xe
    if clf.normalization.normalizes_classifier:
        dW = normalization_backward(dW, clf.weights)
    return dW, dS.sum(axis=0)


def grad_contrastive_wrt_projection(z, label, bank, tau, family=Family.BCE):
    """Exact gradient of the contrastive loss w.r.t. an unnormalized projection ``z``.

    Always orthogonal to ``z`` because the loss only sees its direction.
    """
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if not np.any(z):
        raise ValueError("zero projection: cosine undefined")
    _, dcos, Zn, norms, active = contrastive_rows(z, [label], bank, tau, family)
    if not active[0]:
        raise SlotUninitialized(f"memory-bank slot {label} not initialized")
    dzn = dcos @ bank.slots
    return ((dzn - (dzn @ Zn[0]) * Zn) / norms[0])[0]


def contrastive_grad_simplified(z, label, bank, tau, family=Family.BCE):
    """Pull/repel form of the contrastive gradient, for comparison only.

    ``-(1/tau)(1 - Act(c_k)) z*_k + sum_j (1/tau) Act(c_j) z*_j`` with the
    activation evaluated at ``cos / tau``. It treats ``z`` as already unit
    length, i.e. it omits the tangent projection that
    :func:`grad_contrastive_wrt_projection` applies, so the two agree only
    after projecting onto the tangent space at ``z``.
    """
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    _, dcos, _, _, active = contrastive_rows(z, [label], bank, tau, family)
    if not active[0]:
        raise SlotUninitialized(f"memory-bank slot {label} not initialized")
    return (dcos @ bank.slots)[0]


def grad_uniform_wrt_classifier(W, family=Family.BCE, include_positive=False):
    """Unconstrained gradient of ``(1/K) sum_k L_cc(w_k)`` with respect to every row.

    Each pair ``(k, j)`` appears in both ``L_cc(w_k)`` and ``L_cc(w_j)``, so
    every row collects two contributions per partner. Project with
    :func:`tangent_project` to get the unit-sphere gradient.
    """
    if isinstance(W, Classifier):
        W = uniform_weights(W)
    W = np.asarray(W, dtype=np.float64)
    K = W.shape[0]
    _, dU = uniform_rows(W, family, include_positive, np.full(K, 1.0 / K))
    return (dU + dU.T) @ W


def uniform_loss_value(W, family=Family.BCE, include_positive=False):
    """``(1/K) sum_k L_cc(w_k)`` evaluated on raw rows (no unit-norm check)."""
    W = np.asarray(W, dtype=np.float64)
    K = W.shape[0]
    rows, _ = uniform_rows(W, family, include_positive, np.full(K, 1.0 / K))
    return float(np.sum(rows))


# -- finite differences ----------------------------------------------------------


class NondeterministicLossError(RuntimeError):
    """The loss gave different values at the same point; masks were not frozen."""


def finite_diff(loss, theta, step=1e-6, check_determinism=True):
    """Central differences ``(f(t + h e_i) - f(t - h e_i)) / 2h`` for every coordinate."""
    if not step > 0:
        raise ValueError("step must be > 0")
    theta = np.array(theta, dtype=np.float64).reshape(-1)
    if check_determinism:
        f0 = loss(theta.copy())
        if loss(theta.copy()) != f0:
            raise NondeterministicLossError(
                "loss is not deterministic at fixed parameters; freeze RNG state and masks"
            )
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + step
        fp = loss(theta.copy())
        theta[i] = orig - step
        fm = loss(theta.copy())
        theta[i] = orig
        # subtract in the loss's own precision (may be extended)
        grad[i] = (fp - fm) / (2.0 * step)
    return grad


@dataclass
class GradReport:
    op: str
    seed: int
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float
    max_abs_err: float
    worst_index: int

    def passed(self, tol):
        return self.max_rel_err <= tol

    def line(self, tol=None):
        status = ""
        if tol is not None:
            status = "  PASS" if self.passed(tol) else "  FAIL"
        return (
            f"{self.op:<24s} seed={self.seed:<4d} n={self.analytic.size:<5d} "
            f"max_rel={self.max_rel_err:.3e} max_abs={self.max_abs_err:.3e} "
            f"worst_coord={self.worst_index}{status}"
        )


def compare(op, seed, analytic, numeric, floor=1e-8):
    """Coordinate-wise errors; relative error uses ``max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.shape != n.shape:
        raise ValueError(f"analytic {a.shape} and numeric {n.shape} differ in length")
    abs_err = np.abs(a - n)
    rel_err = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    worst = int(np.argmax(rel_err)) if rel_err.size else 0
    return GradReport(
        op=op,
        seed=int(seed),
        analytic=a,
        numeric=n,
        max_rel_err=float(rel_err.max(initial=0.0)),
        max_abs_err=float(abs_err.max(initial=0.0)),
        worst_index=worst,
    )


# -- gradcheck problems ------------------------------------------------------------
#
# Each problem builds a random instance from a seed and returns
# ``(analytic_flat, loss_of_flat_params, theta0)``.

_MODES = list(Normalization)


def _rand_classifier(rng, K, d, mode):
    return Classifier(rng.normal(size=(K, d)), rng.normal(scale=0.5, size=K), mode)


def _ext(a):
    return np.asarray(a, dtype=ref.EXT)


def _joint_feature(family):
    def problem(seed):
        rng = np.random.default_rng(seed)
        K, d = 7, 5
        clf = _rand_classifier(rng, K, d, _MODES[seed % 4])
        x = rng.normal(size=d)
        k = int(rng.integers(K))
        keep = rng.random(K) < 0.6 if family is Family.BCE else None
        mode = clf.normalization
        W, b = _ext(clf.weights), _ext(clf.biases)

        def f(theta):
            S = ref.logits(_ext(theta)[None, :], W, b, mode.normalizes_features,
                           mode.normalizes_classifier)
            mask = None if keep is None else keep[None, :]
            return ref.joint_loss(S, [k], family.value, mask)

        return grad_joint_wrt_feature(x, k, clf, keep, family), f, x

    return problem


def _joint_classifier(family):
    def problem(seed):
        rng = np.random.default_rng(seed)
        K, d, B = 6, 4, 9
        mode = _MODES[seed % 4]
        clf = _rand_classifier(rng, K, d, mode)
        X = rng.normal(size=(B, d))
        y = rng.integers(K, size=B)
        keep = rng.random((B, K)) < 0.6 if family is Family.BCE else None
        sw = cb_weight(rng.integers(1, 500, size=K), 0.99)[y] if seed % 2 else None
        Xe = _ext(X)
        w = None if sw is None else _ext(sw) / B

        def f(theta):
            t = _ext(theta)
            S = ref.logits(Xe, t[: K * d].reshape(K, d), t[K * d:], mode.normalizes_features,
                           mode.normalizes_classifier)
            return ref.joint_loss(S, y, family.value, keep, w)

        dW, db = grad_joint_wrt_classifier(X, y, clf, keep, family, sw)
        return np.concatenate([dW.ravel(), db]), f, np.concatenate([clf.weights.ravel(), clf.biases])

    return problem


def _contrastive(family):
    def problem(seed):
        rng = np.random.default_rng(seed)
        K, dp = 6, 4
        slots = rng.normal(size=(K, dp))
        slots /= np.linalg.norm(slots, axis=1, keepdims=True)
        init = rng.random(K) < 0.8
        k = int(rng.integers(K))
        init[k] = True
        bank = MemoryBank(np.where(init[:, None], slots, 0.0), init)
        tau = float(rng.uniform(0.3, 1.0))
        z = rng.normal(size=dp)
        slots_e = _ext(bank.slots)

        def f(theta):
            return ref.contrastive_loss(_ext(theta)[None, :], [k], slots_e, init,
                                        ref.EXT(tau), family.value, ref.EXT(1))

        return grad_contrastive_wrt_projection(z, k, bank, tau, family), f, z

    return problem


def _uniform(family):
    def problem(seed):
        rng = np.random.default_rng(seed)
        K, d = 5, 4
        W = rng.normal(size=(K, d))
        W /= np.linalg.norm(W, axis=1, keepdims=True)
        pos = bool(seed % 2)

        def f(theta):
            return ref.uniform_loss(_ext(theta).reshape(K, d), family.value, pos)

        return grad_uniform_wrt_classifier(W, family, pos).ravel(), f, W.ravel()

    return problem


def _model(family):
    def problem(seed):
        from .model import model_gradcheck_problem

        return model_gradcheck_problem(seed, family)

    return problem


GRADCHECK_OPS = {
    "joint_feature_bce": _joint_feature(Family.BCE),
    "joint_feature_ce": _joint_feature(Family.CE),
    "joint_classifier_bce": _joint_classifier(Family.BCE),
    "joint_classifier_ce": _joint_classifier(Family.CE),
    "contrastive_bce": _contrastive(Family.BCE),
    "contrastive_ce": _contrastive(Family.CE),
    "uniform_bce": _uniform(Family.BCE),
    "uniform_ce": _uniform(Family.CE),
    "model_bce3s": _model(Family.BCE),
    "model_ce3s": _model(Family.CE),
}


def gradcheck_suite(seeds=range(20), tol=1e-4, step=1e-6, ops=None):
    """Run every analytic gradient against :func:`finite_diff` for each seed.

    Returns one :class:`GradReport` per (op, seed); use :func:`failures` to
    pick out the ones exceeding ``tol``.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    names = list(GRADCHECK_OPS) if ops is None else list(ops)
    reports = []
    for name in names:
        problem = GRADCHECK_OPS[name]
        for seed in seeds:
            analytic, f, theta = problem(int(seed))
            reports.append(compare(name, seed, analytic, finite_diff(f, theta, step)))
    return reports


def failures(reports, tol):
    return [r for r in reports if not r.passed(tol)]


def worst_by_op(reports):
    out = {}
    for r in reports:
        if r.op not in out or r.max_rel_err > out[r.op].max_rel_err:
            out[r.op] = r
    return out
