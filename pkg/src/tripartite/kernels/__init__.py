"""Row-wise BCE and softmax-CE kernels shared by every loss in the package.

Each kernel takes a score matrix ``S`` (rows are samples, columns are classes
or memory-bank slots), an integer ``labels`` vector where ``-1`` marks a row
to skip, an optional boolean ``keep`` mask and per-row weights. It returns the
weighted per-row loss and its gradient with respect to ``S`` in one pass.

``keep`` means different things per kernel:

* ``bce_rows``: whether the negative term ``softplus(S[i, j])`` is included.
* ``ce_rows``: whether column ``j`` enters the softmax denominator.

The positive column ``labels[i]`` is always part of a row.

The compiled module ``_core`` is used when it imports, otherwise the numpy
code in ``_fallback``. Set ``TRIPARTITE_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("TRIPARTITE_PURE_PYTHON", "").lower() not in ("1", "true", "yes"):
    try:
        from . import _core
    except ImportError:
        pass
    else:
        _impl = _core
        BACKEND = "cython"


def available_backends():
    names = {"python": _fallback}
    try:
        from . import _core
    except ImportError:
        pass
    else:
        names["cython"] = _core
    return names


def _prepare(S, labels, keep, weights):
    S = np.ascontiguousarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ValueError(f"score matrix must be 2-D, got shape {S.shape}")
    n = S.shape[0]
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.size and labels.max() >= S.shape[1]:
        raise ValueError("label index out of range")
    if keep is not None:
        keep = np.ascontiguousarray(keep, dtype=bool)
        if keep.shape != S.shape:
            raise ValueError(f"keep mask shape {keep.shape} != scores {S.shape}")
        keep = keep.view(np.uint8)
    if weights is None:
        weights = np.ones(n)
    else:
        weights = np.ascontiguousarray(np.broadcast_to(weights, (n,)), dtype=np.float64)
    return S, labels, keep, weights


def bce_rows(S, labels, keep=None, weights=None, include_positive=True, backend=None):
    impl = _impl if backend is None else available_backends()[backend]
    S, labels, keep, weights = _prepare(S, labels, keep, weights)
    return impl.bce_rows(S, labels, keep, weights, bool(include_positive))


def ce_rows(S, labels, keep=None, weights=None, backend=None):
    impl = _impl if backend is None else available_backends()[backend]
    S, labels, keep, weights = _prepare(S, labels, keep, weights)
    return impl.ce_rows(S, labels, keep, weights)


def softplus(x):
    """``log(1 + exp(x))`` without overflow; returns a float for scalar input."""
    out = _impl.softplus(x)
    return float(out) if np.ndim(x) == 0 else out


def sigmoid(x):
    out = _impl.sigmoid(x)
    return float(out) if np.ndim(x) == 0 else out


__all__ = ["BACKEND", "available_backends", "bce_rows", "ce_rows", "softplus", "sigmoid"]
