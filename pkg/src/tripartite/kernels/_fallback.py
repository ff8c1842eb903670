"""Numpy implementation of the row kernels (used when ``_core`` is unavailable)."""

import numpy as np


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _valid_rows(labels):
    rows = np.flatnonzero(labels >= 0)
    return rows, labels[rows]


def bce_rows(S, labels, keep, weights, include_positive):
    n, K = S.shape
    rows, lab = _valid_rows(labels)
    neg = np.zeros((n, K), dtype=bool)
    if keep is None:
        neg[rows] = True
    else:
        neg[rows] = keep[rows].astype(bool)
    neg[rows, lab] = False

    loss = np.where(neg, softplus(S), 0.0).sum(axis=1)
    dS = np.where(neg, sigmoid(S), 0.0)
    if include_positive:
        s_pos = S[rows, lab]
        loss[rows] += softplus(-s_pos)
        dS[rows, lab] = -sigmoid(-s_pos)
    loss *= weights
    dS *= weights[:, None]
    return loss, dS


def ce_rows(S, labels, keep, weights):
    n, K = S.shape
    rows, lab = _valid_rows(labels)
    loss = np.zeros(n)
    dS = np.zeros((n, K))
    if rows.size == 0:
        return loss, dS

    Sv = S[rows]
    inc = np.ones_like(Sv, dtype=bool) if keep is None else keep[rows].astype(bool)
    inc[np.arange(rows.size), lab] = True
    Sm = np.where(inc, Sv, -np.inf)
    r = np.arange(rows.size)
    jmax = np.argmax(Sm, axis=1)
    # on ties prefer the label, as the compiled kernel does
    jmax = np.where(Sv[r, lab] >= Sm[r, jmax], lab, jmax)
    m = Sm[r, jmax]
    e = np.exp(Sm - m[:, None])
    # sum the non-maximal terms separately so log1p keeps tiny losses positive
    e[r, jmax] = 0.0
    others = e.sum(axis=1)
    e[r, jmax] = 1.0
    Z = 1.0 + others

    loss[rows] = (m - Sv[r, lab]) + np.log1p(others)
    p = e / Z[:, None]
    p[r, lab] -= 1.0
    # 1/Z - 1 cancels when the label wins; use -others/Z
    won = jmax == lab
    p[r[won], lab[won]] = -others[won] / Z[won]
    dS[rows] = p
    loss *= weights
    dS *= weights[:, None]
    return loss, dS
