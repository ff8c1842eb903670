"""Plain-numpy reference losses, generic over the float dtype.

These share no code with the kernels and are used as the second route in
gradient checks and loss-equivalence tests. Called with ``np.longdouble``
inputs they evaluate the losses with about three extra decimal digits, which
keeps central-difference roundoff well under the gradient-check tolerance.
"""

import numpy as np

EXT = np.longdouble


def softplus(x):
    return np.logaddexp(np.zeros_like(x), x)


def _unit(V):
    return V / np.sqrt(np.sum(V * V, axis=-1, keepdims=True))


def logits(X, W, b, normalize_features, normalize_classifier):
    X = _unit(X) if normalize_features else X
    W = _unit(W) if normalize_classifier else W
    return X @ W.T + b


def bce_row(s, k, keep=None):
    """``softplus(-s_k) + sum over kept j != k of softplus(s_j)``."""
    neg = np.ones(s.shape[0], dtype=bool) if keep is None else np.array(keep, dtype=bool)
    neg[k] = False
    return softplus(-s[k]) + np.sum(softplus(s[neg]))


def ce_row(s, k, keep=None):
    """``-log softmax(s)_k`` with the denominator over kept entries (plus ``k``)."""
    inc = np.ones(s.shape[0], dtype=bool) if keep is None else np.array(keep, dtype=bool)
    inc[k] = True
    t = s[inc]
    m = np.max(t)
    return m + np.log(np.sum(np.exp(t - m))) - s[k]


def joint_loss(S, y, family, keep=None, weights=None):
    row = bce_row if family == "bce" else ce_row
    B = S.shape[0]
    w = np.full(B, 1, dtype=S.dtype) / B if weights is None else weights
    total = S.dtype.type(0)
    for i in range(B):
        kp = None if keep is None or family != "bce" else keep[i]
        total = total + w[i] * row(S[i], int(y[i]), kp)
    return total


def contrastive_loss(P, y, slots, initialized, tau, family, weight):
    """Sum over samples with an initialized own slot of ``weight * loss``."""
    row = bce_row if family == "bce" else ce_row
    cos = _unit(P) @ slots.T
    total = P.dtype.type(0)
    for i in range(P.shape[0]):
        k = int(y[i])
        if initialized[k]:
            total = total + weight * row(cos[i] / tau, k, initialized)
    return total


def uniform_loss(W, family, include_positive=False, weight=None):
    """``weight * sum_k L_cc(w_k)`` on the rows of ``W`` as given (no normalization)."""
    K = W.shape[0]
    U = W @ W.T
    total = W.dtype.type(0)
    for k in range(K):
        if family == "bce":
            neg = np.arange(K) != k
            v = np.sum(softplus(U[k, neg]))
            if include_positive:
                v = v + softplus(-U[k, k])
        else:
            v = ce_row(U[k], k)
        total = total + v
    w = W.dtype.type(1) / K if weight is None else weight
    return w * total
