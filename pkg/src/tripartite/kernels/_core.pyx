# cython: language_level=3
"""Compiled row kernels: fused loss + gradient for BCE and softmax-CE rows."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p

cnp.import_array()


cdef inline double _softplus(double x) noexcept nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def softplus(x):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(flat)
    cdef double[::1] src = flat
    cdef double[::1] dst = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(src.shape[0]):
            dst[i] = _softplus(src[i])
    return out.reshape(np.shape(x))


def sigmoid(x):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(flat)
    cdef double[::1] src = flat
    cdef double[::1] dst = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(src.shape[0]):
            dst[i] = _sigmoid(src[i])
    return out.reshape(np.shape(x))


def bce_rows(const double[:, ::1] S, const cnp.int64_t[::1] labels, keep,
             const double[::1] weights, bint include_positive):
    cdef Py_ssize_t n = S.shape[0]
    cdef Py_ssize_t K = S.shape[1]
    cdef Py_ssize_t i, j
    cdef cnp.int64_t k
    cdef double acc, s, wi
    cdef bint masked = keep is not None
    cdef const unsigned char[:, ::1] M
    if masked:
        M = keep

    loss = np.zeros(n)
    grad = np.zeros((n, K))
    cdef double[::1] L = loss
    cdef double[:, ::1] D = grad

    with nogil:
        for i in range(n):
            k = labels[i]
            if k < 0:
                continue
            wi = weights[i]
            acc = 0.0
            for j in range(K):
                s = S[i, j]
                if j == k:
                    if include_positive:
                        acc = acc + _softplus(-s)
                        D[i, j] = -wi * _sigmoid(-s)
                elif not masked or M[i, j]:
                    acc = acc + _softplus(s)
                    D[i, j] = wi * _sigmoid(s)
            L[i] = wi * acc
    return loss, grad


def ce_rows(const double[:, ::1] S, const cnp.int64_t[::1] labels, keep,
            const double[::1] weights):
    cdef Py_ssize_t n = S.shape[0]
    cdef Py_ssize_t K = S.shape[1]
    cdef Py_ssize_t i, j, jmax
    cdef cnp.int64_t k
    cdef double m, e, others, Z, wi
    cdef bint masked = keep is not None
    cdef const unsigned char[:, ::1] M
    if masked:
        M = keep

    loss = np.zeros(n)
    grad = np.zeros((n, K))
    cdef double[::1] L = loss
    cdef double[:, ::1] D = grad

    with nogil:
        for i in range(n):
            k = labels[i]
            if k < 0:
                continue
            wi = weights[i]
            jmax = k
            m = S[i, k]
            for j in range(K):
                if (j == k or not masked or M[i, j]) and S[i, j] > m:
                    m = S[i, j]
                    jmax = j
            others = 0.0
            for j in range(K):
                if j != jmax and (j == k or not masked or M[i, j]):
                    e = exp(S[i, j] - m)
                    D[i, j] = e
                    others = others + e
            D[i, jmax] = 1.0
            Z = 1.0 + others
            for j in range(K):
                D[i, j] = wi * (D[i, j] / Z)
            if jmax == k:
                # 1/Z - 1 cancels when the label wins; use -others/Z
                D[i, k] = -wi * (others / Z)
            else:
                D[i, k] = D[i, k] - wi
            L[i] = wi * ((m - S[i, k]) + log1p(others))
    return loss, grad
